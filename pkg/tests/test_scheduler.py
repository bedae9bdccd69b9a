import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csipose import scheduler as sch
from csipose.csi import CsiError
from csipose.scheduler import Feedback, InfeasibleError, ScheduleConfig


# --- budget --------------------------------------------------------------------

def test_budget_at_five_links():
    t, steps = sch.budget(5)
    assert t == pytest.approx(0.45, abs=1e-12)
    assert steps == 22


def test_budget_single_link():
    assert sch.budget(1) == (pytest.approx(0.85), 42)


def test_budget_at_the_edge():
    # 1 - 9 * 0.1 - 0.05 leaves 0.05 s, two whole steps
    assert sch.budget(9) == (pytest.approx(0.05), 2)


def test_budget_beyond_edge_reports_max():
    with pytest.raises(InfeasibleError) as e:
        sch.budget(10)
    assert e.value.max_feasible == 9


def test_budget_zero_links():
    with pytest.raises(InfeasibleError):
        sch.budget(0)


@pytest.mark.parametrize("kw,n_max", [({}, 9), ({"per_step_s": 0.2}, 7), ({"frame_period_s": 0.5}, 4),
                                      ({"n_links_max": 6}, 6)])
def test_feasible_range(kw, n_max):
    assert sch.feasible_range(ScheduleConfig(**kw)) == (1, n_max)


def test_steps_decrease_with_links():
    steps = [sch.budget(n)[1] for n in range(1, 10)]
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_config_validation():
    with pytest.raises(CsiError):
        ScheduleConfig(per_link_s=0.0)
    with pytest.raises(CsiError, match="infeasible"):
        ScheduleConfig(frame_period_s=0.1)
    with pytest.raises(CsiError):
        ScheduleConfig(min_steps=0)


def test_config_is_frozen():
    with pytest.raises(Exception):
        ScheduleConfig().per_link_s = 0.2


def test_config_from_dict():
    assert sch.config_from_dict({"per_step_s": 0.05}).per_step_s == 0.05
    with pytest.raises(CsiError, match="unknown"):
        sch.config_from_dict({"bogus": 1})


# --- feedback ------------------------------------------------------------------

def test_posture_mismatch_adds_a_link():
    cfg = ScheduleConfig()
    s = sch.feedback_step(sch.initial_state(cfg, 5), Feedback("posture_mismatch"), cfg)
    assert (s.n_links, s.steps, s.dwell_counter) == (6, 17, 3)


def test_quality_low_drops_a_link():
    cfg = ScheduleConfig()
    s = sch.feedback_step(sch.initial_state(cfg, 5), Feedback("quality_low"), cfg)
    assert (s.n_links, s.steps) == (4, 27)


def test_dwell_blocks_changes():
    cfg = ScheduleConfig()
    s = sch.initial_state(cfg, 5)
    s = sch.feedback_step(s, Feedback("posture_mismatch"), cfg)
    for _ in range(3):
        s = sch.feedback_step(s, Feedback("posture_mismatch"), cfg)
        assert s.n_links == 6
    s = sch.feedback_step(s, Feedback("posture_mismatch"), cfg)
    assert s.n_links == 7


def test_saturation_at_both_ends():
    cfg = ScheduleConfig(dwell_frames=0)
    hi = sch.feedback_step(sch.initial_state(cfg, 9), Feedback("posture_mismatch"), cfg)
    lo = sch.feedback_step(sch.initial_state(cfg, 1), Feedback("quality_low"), cfg)
    assert hi.n_links == 9 and hi.saturated
    assert lo.n_links == 1 and lo.saturated


def test_unknown_feedback_kind():
    with pytest.raises(CsiError):
        Feedback("meh")


def test_initial_state_is_clipped():
    cfg = ScheduleConfig()
    assert sch.initial_state(cfg, 20).n_links == 9
    assert sch.initial_state(cfg, 0).n_links == 1


@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_random_feedback_stays_feasible(seed, dwell):
    cfg = ScheduleConfig(dwell_frames=dwell)
    tr = sch.simulate(cfg, sch.ParametricQuality(), sch.random_policy(), 1000, seed=seed)
    n = tr.column("n_links")
    assert n.min() >= 1 and n.max() <= 9
    assert np.all(np.abs(np.diff(n)) <= 1)
    changes = np.flatnonzero(np.diff(n)) + 1
    # consecutive changes are at least dwell + 1 frames apart
    assert np.all(np.diff(changes) >= dwell + 1)
    for k, s in zip(n, tr.column("steps")):
        assert s == sch.budget(int(k), cfg)[1]


def test_constant_ok_keeps_state():
    tr = sch.simulate(ScheduleConfig(), sch.ParametricQuality(), sch.constant_policy("ok"), 50)
    assert set(tr.column("n_links")) == {5}
    assert set(tr.column("steps")) == {22}


def test_history_is_bounded():
    cfg = ScheduleConfig(history_len=4)
    s = sch.initial_state(cfg)
    for _ in range(10):
        s = sch.feedback_step(s, Feedback("ok"), cfg)
    assert len(s.history) == 4


# --- simulation ----------------------------------------------------------------

def test_threshold_policy_settles_on_smallest_sufficient_count():
    q = sch.ParametricQuality()
    # s(3) = 0.778 and s(4) = 0.837, so four links is the smallest count above 0.8
    tr = sch.simulate(ScheduleConfig(), q, sch.ThresholdPolicy(0.8), 60, initial_links=8)
    n = tr.column("n_links")
    assert np.all(n[-20:] == 4)


def test_threshold_policy_climbs_from_below():
    tr = sch.simulate(ScheduleConfig(), sch.ParametricQuality(), sch.ThresholdPolicy(0.8), 40, initial_links=1)
    assert tr.column("n_links")[-1] == 4


def test_empirical_quality_lookup():
    q = sch.EmpiricalQuality({5: (0.8, 20.0, 6.0)})
    assert q(5, 22) == (0.8, 20.0, 6.0)


def test_parametric_quality_trends():
    q = sch.ParametricQuality()
    s = [q(n, sch.budget(n)[1])[0] for n in range(1, 10)]
    tv = [q(n, sch.budget(n)[1])[1] for n in range(1, 10)]
    assert np.all(np.diff(s) > 0) and np.all(np.diff(tv) > 0)


def test_simulation_deterministic_and_csv():
    cfg = ScheduleConfig()
    q = sch.ParametricQuality(noise=0.05)
    a = sch.simulate(cfg, q, sch.random_policy(), 30, seed=4)
    b = sch.simulate(cfg, q, sch.random_policy(), 30, seed=4)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == ",".join(sch.SimTrace.COLUMNS)
    assert len(lines) == 31
