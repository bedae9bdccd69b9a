"""End-to-end runs: synthetic CSI to skeletons to generated frames, and the link-count sweep.

One output frame is produced per refresh period. For each, the user is
located (large scale), the motion axis estimated (small scale), the links
fused into a network window, the skeleton predicted, and an image generated
with the step count the frame budget leaves over.

Skeletons are compared in a room view: the figure is drawn at its room
position, so the rendering reflects both the pose and where the user was
sensed.
"""

from __future__ import annotations

import csv
import io
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aigc, body, csi, dataset, formats, geometry, metrics, scheduler, skeleton_net, spectral, synth
from .scheduler import ScheduleConfig

VIEW_SIZE = 64
# room metres to view pixels, matching the body scale of the 32-pixel skeleton
PX_PER_M = 0.8 * 32 / 1.9


class StageError(csi.CsiError):
    """A pipeline stage failed; names the stage and the trace frame."""

    def __init__(self, stage: str, frame: int | None, cause: str):
        where = f" at frame {frame}" if frame is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.frame = frame
        self.cause = cause


@dataclass
class PipelineConfig:
    preset: str = "case_study_5rx"
    scene_path: str | None = None
    trace_path: str | None = None
    radio: dict = field(default_factory=dict)
    multiscale: bool = True
    checkpoint: str | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    n_links: int | None = None
    aigc_endpoint: str | None = None
    aigc_stub: bool = True
    out_dir: str | None = None
    seed: int = 0
    snr_db: float = 20.0
    cfo_hz: float = 0.0
    n_frames: int = 3
    instruction: str = "a boxer in a sunlit gym"
    text_guidance: float = aigc.DEFAULT_TEXT_GUIDANCE
    image_guidance: float = aigc.DEFAULT_IMAGE_GUIDANCE
    timeout_s: float = 30.0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = scheduler.config_from_dict(self.schedule)
        if self.n_frames < 1:
            raise csi.CsiError("n_frames must be >= 1")
        if self.n_links is not None and self.n_links < 1:
            raise csi.CsiError("n_links must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise csi.CsiError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d


@dataclass
class FrameResult:
    index: int
    position_error_m: float
    joint_error_px: float
    similarity: float
    tv: float
    naturalness: float


@dataclass
class Report:
    n_links: int
    steps: int
    aigc_time_s: float
    multiscale: bool
    seed: int
    frames: list
    timings_s: dict

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(f, name) for f in self.frames]))

    def to_dict(self) -> dict:
        cols = ("position_error_m", "joint_error_px", "similarity", "tv", "naturalness")
        return {
            "n_links": self.n_links,
            "steps": self.steps,
            "aigc_time_s": self.aigc_time_s,
            "multiscale": self.multiscale,
            "seed": self.seed,
            "frame_index": [f.index for f in self.frames],
            "position_errors_m": [f.position_error_m for f in self.frames],
            "joint_errors_px": [f.joint_error_px for f in self.frames],
            "ssim": [f.similarity for f in self.frames],
            "tv": [f.tv for f in self.frames],
            "naturalness": [f.naturalness for f in self.frames],
            "summary": {c: self.mean(c) for c in cols},
            "timings_s": self.timings_s,
        }


def view_origin(scene: synth.Scene) -> np.ndarray:
    lo, hi = scene.bounds(margin=0.0)
    return (lo + hi) / 2


def placed_skeleton(keypoints, user_pos, origin, size: int = VIEW_SIZE) -> np.ndarray:
    """Skeleton drawn in the room view, shifted by the user's offset from the room centre.

    Room +x runs right and room +y runs up the image.
    """
    kp = np.asarray(keypoints, dtype=float)
    d = (np.asarray(user_pos, dtype=float) - origin) * PX_PER_M
    shift = np.array([d[0], -d[1]]) + (size - 32) / 2
    return body.render_skeleton(kp + shift, size, size)


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextmanager
    def __call__(self, name: str, frame: int | None = None):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, frame, f"{type(e).__name__}: {e}") from e
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def load_scenario(cfg: PipelineConfig):
    radio = csi.RadioConfig.default(**cfg.radio)
    period = int(round(cfg.schedule.frame_period_s * radio.sample_rate_hz))
    duration = cfg.n_frames * period / radio.sample_rate_hz
    if cfg.scene_path or cfg.trace_path:
        if not (cfg.scene_path and cfg.trace_path):
            raise csi.CsiError("scene_path and trace_path must be given together")
        scene = formats.scene_from_dict(formats.read_json(cfg.scene_path))
        trace = formats.trace_from_dict(formats.read_json(cfg.trace_path))
    else:
        scene, trace = synth.preset_scenario(cfg.preset, cfg.seed, duration_s=duration, radio=radio)
    return scene, trace, period


def load_net(cfg: PipelineConfig) -> skeleton_net.Net:
    if not cfg.checkpoint:
        raise StageError("skeleton-net", None, "no checkpoint configured")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise StageError("skeleton-net", None, f"checkpoint {path} not found")
    try:
        return skeleton_net.load_checkpoint(path)
    except (OSError, csi.CsiError) as e:
        raise StageError("skeleton-net", None, str(e)) from e


def run_pipeline(cfg: PipelineConfig, net: skeleton_net.Net | None = None) -> Report:
    """Run every stage on the configured scenario and return the report.

    `net` overrides the checkpoint. When cfg.out_dir is set the per-frame
    images and report.json are written there.
    """
    stage = _Stages()
    if net is None:
        net = load_net(cfg)

    with stage("synth"):
        scene, trace, period = load_scenario(cfg)
        links = scene.links[: cfg.n_links] if cfg.n_links else list(scene.links)
        if cfg.n_links and cfg.n_links > len(scene.links):
            raise csi.CsiError(f"scene has {len(scene.links)} links, {cfg.n_links} requested")
        fcfg = dataset.FeatureConfig(snr_db=cfg.snr_db, cfo_hz=cfg.cfo_hz, multiscale=cfg.multiscale,
                                     window=net.cfg.input_shape[0])
        dyn, _ = synth.render_csi(scene, trace, "dynamic")
        dyn = dataset._impaired({l.id: dyn[l.id] for l in links}, fcfg, cfg.seed + 7919)
        if net.cfg.input_shape[1:] != (scene.radio.n_subcarriers, fcfg.channels):
            raise csi.CsiError(f"checkpoint expects input {net.cfg.input_shape}, "
                               f"scene gives K={scene.radio.n_subcarriers}, C={fcfg.channels}")

    with stage("sanitize"):
        seqs = dataset.link_sequences(dyn)

    with stage("schedule"):
        aigc_time, steps = scheduler.budget(len(links), cfg.schedule)

    ends = [k * period - 1 for k in range(1, cfg.n_frames + 1)]
    ends = [e for e in ends if fcfg.window - 1 <= e < len(trace)]
    if not ends:
        raise StageError("synth", None, "trace too short for one output frame")

    origin = view_origin(scene)
    ref = metrics.default_reference()
    out = Path(cfg.out_dir) if cfg.out_dir else None
    results = []
    for fi, end in enumerate(ends):
        pos, phi = (links[0].tx + links[0].rx) / 2, 0.0
        if len(links) > 1:
            with stage("estimate", end):
                obs = [spectral.observe(dyn[l.id][end], scene.radio) for l in links]
            with stage("locate", end):
                pos = geometry.locate_user(obs, links).pos
            with stage("orient", end):
                rates = {l.id: geometry.path_length_rate(dyn[l.id], end) for l in links}
                try:
                    phi = geometry.estimate_orientation(rates, pos, links, signed=True).phi
                except (geometry.NoMotionError, geometry.SingularityError):
                    phi = 0.0

        with stage("fuse", end):
            x, _ = dataset.window_inputs(seqs, links, end - fcfg.window + 1, fcfg, pos, phi)

        with stage("skeleton-net", end):
            kp = skeleton_net.predict_keypoints(net, x.x[None])[0]

        gt_kp = trace.keypoints[end]
        gt_pos = trace.user_pos[end]
        with stage("render", end):
            gt_img = placed_skeleton(gt_kp, gt_pos, origin)
            pred_img = placed_skeleton(kp, pos, origin)

        with stage("generate", end):
            req = aigc.GenerationRequest(pred_img, cfg.instruction, steps, cfg.text_guidance,
                                         cfg.image_guidance, cfg.timeout_s)
            if cfg.aigc_stub:
                gen = aigc.stub_generate(req, seed=cfg.seed * 1000 + fi)
            else:
                gen = aigc.generate(req, cfg.aigc_endpoint).image

        with stage("metrics", end):
            results.append(FrameResult(
                end,
                float(np.linalg.norm(pos - gt_pos)),
                float(np.linalg.norm(kp - gt_kp, axis=-1).mean()),
                metrics.ssim(gt_img, pred_img),
                metrics.total_variation(gen),
                metrics.naturalness_score(gen, ref),
            ))

        if out is not None:
            with stage("write", end):
                formats.write_image(out / f"frame{fi:03d}_truth.png", gt_img)
                formats.write_image(out / f"frame{fi:03d}_skeleton.png", pred_img)
                formats.write_image(out / f"frame{fi:03d}_generated.png", gen)

    report = Report(len(links), steps, aigc_time, cfg.multiscale, cfg.seed, results, stage.timings)
    if out is not None:
        formats.write_json(out / "report.json", report.to_dict())
    return report


# --- link-count sweep -------------------------------------------------------------

@dataclass
class SweepConfig:
    preset: str = "case_study_5rx"
    n_seeds: int = 20
    seed: int = 0
    n_links: tuple | None = None  # None: the feasible range capped at the scene's link count
    train_samples: int = 160
    train_epochs: int = 8
    snr_db: float = 20.0
    n_frames: int = 3
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class SweepResult:
    n_links: list
    steps: list
    aigc_time_s: list
    similarity: np.ndarray  # seeds x n
    tv: np.ndarray
    naturalness: np.ndarray
    position_error_m: np.ndarray
    joint_error_px: np.ndarray

    COLUMNS = ("n_links", "steps", "aigc_time_s", "similarity", "tv", "naturalness",
               "position_error_m", "joint_error_px")

    def means(self, name: str) -> np.ndarray:
        return getattr(self, name).mean(axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        means = [self.means(c) for c in self.COLUMNS[3:]]
        for i, n in enumerate(self.n_links):
            w.writerow([n, self.steps[i], self.aigc_time_s[i]] + [repr(float(m[i])) for m in means])
        return buf.getvalue()

    def verdicts(self) -> dict:
        """Per metric: whether the seed mean is non-decreasing in n, and the
        share of seeds whose largest-n value strictly exceeds the smallest-n one."""
        out = {}
        for name in ("similarity", "tv", "naturalness"):
            v = getattr(self, name)
            m = v.mean(axis=0)
            out[name] = {
                "mean_non_decreasing": bool(np.all(np.diff(m) >= 0)),
                "endpoint_agreement": float(np.mean(v[:, -1] > v[:, 0])),
            }
        return out


def _concat(parts) -> skeleton_net.Dataset:
    return skeleton_net.Dataset(*(np.concatenate([getattr(p, f) for p in parts])
                                  for f in ("x", "keypoints", "heatmaps")))


def train_oracle_net(preset: str, link_counts=(None,), n_samples: int = 160, epochs: int = 8, seed: int = 0,
                     snr_db: float = 20.0, multiscale: bool = True, scenes_per_count: int = 2) -> skeleton_net.Net:
    """Skeleton net trained on oracle scenarios rendered with each link count in turn.

    Fused windows have the same shape whatever the link count, so one net
    serves them all (None means every link of the scene). A further seed per
    count is held out and the epoch with the lowest held-out joint error is kept.
    """
    fcfg = dataset.FeatureConfig(snr_db=snr_db, multiscale=multiscale)
    counts = list(link_counts)
    per_scene = max(1, n_samples // (len(counts) * scenes_per_count))
    train_parts, val_parts = [], []
    for j, n in enumerate(counts):
        for k in range(scenes_per_count + 1):
            part = dataset.oracle_dataset(preset, seed + k * len(counts) + j, per_scene, fcfg, n)[0]
            (val_parts if k == scenes_per_count else train_parts).append(part)
    radio = csi.RadioConfig.default()
    net = skeleton_net.init_net(
        skeleton_net.NetConfig(input_shape=(fcfg.window, radio.n_subcarriers, fcfg.channels)), seed)
    tcfg = skeleton_net.TrainConfig(epochs=epochs, seed=seed, restore_best=True)
    net, _ = skeleton_net.train(net, _concat(train_parts), tcfg, val=_concat(val_parts))
    return net


def link_count_sweep(cfg: SweepConfig, log=None) -> SweepResult:
    """Sweep the link count with the stub generator.

    A single net, trained on seeds disjoint from the evaluation seeds, serves
    every link count; each (seed, n) pair is then a full pipeline run.
    """
    lo, hi = scheduler.feasible_range(cfg.schedule)
    if cfg.n_links is None:
        n_scene = len(synth.preset_scenario(cfg.preset, 0, duration_s=0.1)[0].links)
        ns = list(range(lo, min(hi, n_scene) + 1))
    else:
        ns = list(cfg.n_links)
    budgets = [scheduler.budget(n, cfg.schedule) for n in ns]
    sim = np.zeros((cfg.n_seeds, len(ns)))
    tv, nat, perr, jerr = (np.zeros_like(sim) for _ in range(4))
    net = train_oracle_net(cfg.preset, ns, cfg.train_samples, cfg.train_epochs, cfg.seed + 100_000, cfg.snr_db)
    for j, n in enumerate(ns):
        for i in range(cfg.n_seeds):
            pc = PipelineConfig(preset=cfg.preset, n_links=n, seed=cfg.seed + i, snr_db=cfg.snr_db,
                                n_frames=cfg.n_frames, schedule=cfg.schedule)
            r = run_pipeline(pc, net)
            sim[i, j], tv[i, j], nat[i, j] = r.mean("similarity"), r.mean("tv"), r.mean("naturalness")
            perr[i, j], jerr[i, j] = r.mean("position_error_m"), r.mean("joint_error_px")
        if log:
            log(f"n_links={n}: similarity {sim[:, j].mean():.4f} tv {tv[:, j].mean():.3f} "
                f"naturalness {nat[:, j].mean():.3f} position error {perr[:, j].mean():.3f} m "
                f"joint error {jerr[:, j].mean():.3f} px")
    return SweepResult(ns, [b[1] for b in budgets], [b[0] for b in budgets], sim, tv, nat, perr, jerr)


reproduce_fig6 = link_count_sweep


# --- multiscale ablation -----------------------------------------------------------

@dataclass
class AblationConfig:
    preset: str = "torso_arm_ambiguity"
    seeds: tuple = tuple(range(10))
    train_samples: int = 160
    train_epochs: int = 8
    snr_db: float = 20.0
    n_frames: int = 5


@dataclass
class AblationResult:
    seeds: list
    on: np.ndarray  # mean joint error per seed, multiscale fusion
    off: np.ndarray  # same seeds, uniform fusion

    @property
    def wins(self) -> int:
        """Seeds where multiscale fusion is at least as accurate."""
        return int(np.sum(self.on <= self.off))


def multiscale_ablation(cfg: AblationConfig, log=None) -> AblationResult:
    """Paired runs per seed: a net trained with each fusion mode on the same
    training seeds, evaluated by the pipeline on the same held-out scenario."""
    on, off = [], []
    for seed in cfg.seeds:
        errs = []
        for ms in (True, False):
            net = train_oracle_net(cfg.preset, (None,), cfg.train_samples, cfg.train_epochs,
                                   100_000 + 10 * seed, cfg.snr_db, multiscale=ms)
            pc = PipelineConfig(preset=cfg.preset, multiscale=ms, seed=seed, snr_db=cfg.snr_db, n_frames=cfg.n_frames)
            errs.append(run_pipeline(pc, net).mean("joint_error_px"))
        on.append(errs[0])
        off.append(errs[1])
        if log:
            log(f"seed {seed}: multiscale {errs[0]:.3f} px, uniform {errs[1]:.3f} px")
    return AblationResult(list(cfg.seeds), np.array(on), np.array(off))
