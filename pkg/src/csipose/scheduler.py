"""Frame-time budget between sensing links and generation steps, and the feedback controller."""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .csi import CsiError

FEEDBACK_KINDS = ("posture_mismatch", "quality_low", "ok")
# guards floor() against 0.85 / 0.02 landing a hair under an integer
_EPS = 1e-9


class InfeasibleError(CsiError):
    def __init__(self, msg: str, max_feasible: int):
        super().__init__(msg)
        self.max_feasible = max_feasible


@dataclass(frozen=True)
class ScheduleConfig:
    frame_period_s: float = 1.0
    per_link_s: float = 0.1
    skeleton_s: float = 0.05
    per_step_s: float = 0.02
    n_links_max: int | None = None  # None: limited by the budget alone
    min_steps: int = 1
    dwell_frames: int = 3
    history_len: int = 16

    def __post_init__(self):
        times = (self.frame_period_s, self.per_link_s, self.skeleton_s, self.per_step_s)
        if min(times) <= 0:
            raise CsiError("all schedule times must be positive")
        if self.min_steps < 1 or self.dwell_frames < 0:
            raise CsiError("min_steps must be >= 1 and dwell_frames >= 0")
        if self.per_link_s + self.skeleton_s + self.min_steps * self.per_step_s > self.frame_period_s + _EPS:
            raise CsiError("budget infeasible even with a single link")
        if self.n_links_max is not None and self.n_links_max < 1:
            raise CsiError("n_links_max must be >= 1")


def _aigc_time(n_links: int, cfg: ScheduleConfig) -> float:
    return cfg.frame_period_s - n_links * cfg.per_link_s - cfg.skeleton_s


def feasible_range(cfg: ScheduleConfig) -> tuple[int, int]:
    """(1, n_max): the largest link count that still leaves min_steps of generation."""
    spare = cfg.frame_period_s - cfg.skeleton_s - cfg.min_steps * cfg.per_step_s
    n_max = int(math.floor(spare / cfg.per_link_s + _EPS))
    if cfg.n_links_max is not None:
        n_max = min(n_max, cfg.n_links_max)
    return 1, n_max


def budget(n_links: int, cfg: ScheduleConfig | None = None) -> tuple[float, int]:
    """Generation time left in one frame and the step count it buys."""
    cfg = cfg or ScheduleConfig()
    n_max = feasible_range(cfg)[1]
    if not 1 <= n_links <= n_max:
        raise InfeasibleError(
            f"{n_links} links leave {_aigc_time(n_links, cfg):.3f} s for generation; "
            f"at most {n_max} links are feasible", n_max)
    t = round(_aigc_time(n_links, cfg), 12)
    steps = int(math.floor(t / cfg.per_step_s + _EPS))
    return t, steps


@dataclass(frozen=True)
class Feedback:
    kind: str
    timestamp: float = 0.0

    def __post_init__(self):
        if self.kind not in FEEDBACK_KINDS:
            raise CsiError(f"unknown feedback kind {self.kind!r}")


@dataclass
class ScheduleState:
    n_links: int
    steps: int
    dwell_counter: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=16))
    saturated: bool = False


def initial_state(cfg: ScheduleConfig, n_links: int = 5) -> ScheduleState:
    """Start at the scene's link count (clipped into the feasible range)."""
    lo, hi = feasible_range(cfg)
    n = min(max(n_links, lo), hi)
    return ScheduleState(n, budget(n, cfg)[1], 0, deque(maxlen=cfg.history_len))


def feedback_step(state: ScheduleState, fb: Feedback, cfg: ScheduleConfig) -> ScheduleState:
    """Apply one feedback event; returns a new state.

    A posture mismatch adds a link, low quality drops one. Either change is
    only taken once the dwell counter has run out, and every change re-arms
    it. Requests past the feasible range leave n unchanged and set the
    saturation flag.
    """
    lo, hi = feasible_range(cfg)
    history = deque(state.history, maxlen=cfg.history_len)
    history.append(fb)
    want = {"posture_mismatch": 1, "quality_low": -1, "ok": 0}[fb.kind]
    n, counter, saturated = state.n_links, state.dwell_counter, False
    target = n + want
    if want and not lo <= target <= hi:
        saturated = True
        counter = max(counter - 1, 0)
    elif want and counter == 0:
        n, counter = target, cfg.dwell_frames
    else:
        counter = max(counter - 1, 0)
    return ScheduleState(n, budget(n, cfg)[1], counter, history, saturated)


# --- quality models and policies ------------------------------------------------

@dataclass
class ParametricQuality:
    """similarity = s_max (1 - exp(-n / k)); tv and naturalness fall as 1 / steps."""

    s_max: float = 0.9
    k: float = 1.5
    tv_floor: float = 2.0
    tv_scale: float = 60.0
    nat_floor: float = 3.0
    nat_scale: float = 100.0
    noise: float = 0.0

    def __call__(self, n_links: int, steps: int, rng=None):
        s = self.s_max * (1 - math.exp(-n_links / self.k))
        tv = self.tv_floor + self.tv_scale / steps
        nat = self.nat_floor + self.nat_scale / steps
        if self.noise and rng is not None:
            s, tv, nat = (v * (1 + self.noise * rng.standard_normal()) for v in (s, tv, nat))
        return s, tv, nat


@dataclass
class EmpiricalQuality:
    """Lookup of measured (similarity, tv, naturalness) per link count."""

    table: dict

    def __call__(self, n_links: int, steps: int, rng=None):
        return tuple(self.table[n_links])


@dataclass
class ThresholdPolicy:
    """Complain about posture while similarity is below target; otherwise probe
    one link lower unless that count is already known to miss the target."""

    target: float
    known_fail: int = 0

    def __call__(self, n_links: int, similarity: float, rng=None) -> str:
        if similarity < self.target:
            self.known_fail = max(self.known_fail, n_links)
            return "posture_mismatch"
        if n_links - 1 > self.known_fail:
            return "quality_low"
        return "ok"


def constant_policy(kind: str):
    def policy(n_links, similarity, rng=None):
        return kind
    return policy


def random_policy(p=(0.4, 0.4, 0.2)):
    """Feedback kinds drawn i.i.d. from the simulation RNG."""
    def policy(n_links, similarity, rng):
        return FEEDBACK_KINDS[int(rng.choice(3, p=p))]
    return policy


@dataclass
class SimRecord:
    frame: int
    n_links: int
    steps: int
    similarity: float
    tv: float
    naturalness: float
    feedback: str
    saturated: bool


@dataclass
class SimTrace:
    records: list

    COLUMNS = ("frame", "n_links", "steps", "similarity", "tv", "naturalness", "feedback", "saturated")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([getattr(r, c) for c in self.COLUMNS])
        return buf.getvalue()


def simulate(cfg: ScheduleConfig, quality_model, feedback_policy, n_frames: int, seed: int = 0,
             initial_links: int = 5) -> SimTrace:
    """Run the controller for n_frames. Each frame records the quality at the
    current state, asks the policy for feedback and applies it for the next frame."""
    rng = np.random.default_rng(seed)
    state = initial_state(cfg, initial_links)
    records = []
    for i in range(n_frames):
        s, tv, nat = quality_model(state.n_links, state.steps, rng)
        kind = feedback_policy(state.n_links, s, rng)
        nxt = feedback_step(state, Feedback(kind, float(i) * cfg.frame_period_s), cfg)
        records.append(SimRecord(i, state.n_links, state.steps, float(s), float(tv), float(nat), kind, nxt.saturated))
        state = nxt
    return SimTrace(records)


def config_from_dict(d: dict) -> ScheduleConfig:
    known = {f for f in ScheduleConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise CsiError(f"unknown schedule config keys: {sorted(unknown)}")
    return replace(ScheduleConfig(), **d)
