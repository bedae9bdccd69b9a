import json

import numpy as np
import pytest

from csipose import body, pipeline, scheduler, synth
from csipose import skeleton_net as sn
from csipose.csi import CsiError
from csipose.pipeline import PipelineConfig, StageError


@pytest.fixture(scope="module")
def net():
    return sn.init_net(sn.NetConfig(), 0)


def test_report_shape_and_budget(net):
    r = pipeline.run_pipeline(PipelineConfig(n_frames=2, seed=1), net)
    assert len(r.frames) == 2
    assert (r.n_links, r.steps) == (5, 22)
    assert r.aigc_time_s == pytest.approx(0.45)
    for f in r.frames:
        assert np.isfinite([f.position_error_m, f.joint_error_px, f.similarity, f.tv, f.naturalness]).all()
    assert {"synth", "locate", "orient", "skeleton-net", "generate"} <= set(r.timings_s)


def test_outputs_written(tmp_path, net):
    pipeline.run_pipeline(PipelineConfig(n_frames=1, out_dir=str(tmp_path)), net)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["frame000_generated.png", "frame000_skeleton.png", "frame000_truth.png", "report.json"]
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["steps"] == 22 and len(rep["ssim"]) == 1


def test_pipeline_is_deterministic(net):
    a = pipeline.run_pipeline(PipelineConfig(n_frames=1, seed=4), net)
    b = pipeline.run_pipeline(PipelineConfig(n_frames=1, seed=4), net)
    assert a.frames == b.frames


def test_fewer_links_buy_more_steps(net):
    r = pipeline.run_pipeline(PipelineConfig(n_frames=1, n_links=2), net)
    assert (r.n_links, r.steps) == (2, scheduler.budget(2)[1])


def test_single_link_skips_localization(net):
    r = pipeline.run_pipeline(PipelineConfig(n_frames=1, n_links=1), net)
    assert "locate" not in r.timings_s


def test_missing_checkpoint():
    with pytest.raises(StageError) as e:
        pipeline.run_pipeline(PipelineConfig(checkpoint="/nonexistent.ckpt"))
    assert e.value.stage == "skeleton-net" and e.value.frame is None


def test_too_many_links(net):
    with pytest.raises(StageError) as e:
        pipeline.run_pipeline(PipelineConfig(n_links=6), net)
    assert e.value.stage == "synth"


def test_checkpoint_shape_mismatch():
    small = sn.init_net(sn.NetConfig(input_shape=(16, 30, 2)), 0)
    with pytest.raises(StageError, match="expects input"):
        pipeline.run_pipeline(PipelineConfig(n_frames=1), small)


def test_uniform_fusion_uses_two_channels():
    net2 = sn.init_net(sn.NetConfig(input_shape=(16, 30, 2)), 0)
    r = pipeline.run_pipeline(PipelineConfig(n_frames=1, multiscale=False), net2)
    assert not r.multiscale and len(r.frames) == 1


def test_config_round_trip_and_validation():
    cfg = PipelineConfig(n_links=3, schedule={"per_step_s": 0.05})
    assert cfg.schedule.per_step_s == 0.05
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(CsiError, match="unknown"):
        PipelineConfig.from_dict({"nope": 1})
    with pytest.raises(CsiError):
        PipelineConfig(n_frames=0)


def test_placed_skeleton_centre_matches_plain_render():
    kp = body.image_keypoints(body.body_joints(body.Pose()))
    scene, _ = synth.preset_scenario("case_study_5rx", 0)
    origin = pipeline.view_origin(scene)
    img = pipeline.placed_skeleton(kp, origin, origin, size=64)
    np.testing.assert_array_equal(img, body.render_skeleton(kp + 16, 64, 64))


def test_placed_skeleton_moves_with_user():
    kp = body.image_keypoints(body.body_joints(body.Pose()))
    origin = np.zeros(2)
    a = pipeline.placed_skeleton(kp, origin, origin)
    b = pipeline.placed_skeleton(kp, origin + [0.5, 0.0], origin)
    c = pipeline.placed_skeleton(kp, origin + [0.0, 0.5], origin)
    cx = lambda img: np.average(np.arange(img.shape[1]), weights=img.sum(axis=0))
    cy = lambda img: np.average(np.arange(img.shape[0]), weights=img.sum(axis=1))
    # half a metre is PX_PER_M / 2 pixels; room +y points up the image
    assert cx(b) - cx(a) == pytest.approx(pipeline.PX_PER_M / 2, abs=1.0)
    assert cy(a) - cy(c) == pytest.approx(pipeline.PX_PER_M / 2, abs=1.0)


def test_sweep_result_verdicts_and_csv():
    sim = np.array([[0.1, 0.2, 0.3], [0.2, 0.1, 0.4]])
    res = pipeline.SweepResult([1, 2, 3], [42, 37, 32], [0.85, 0.75, 0.65], sim, sim, -sim,
                               np.zeros_like(sim), np.zeros_like(sim))
    v = res.verdicts()
    assert v["similarity"] == {"mean_non_decreasing": True, "endpoint_agreement": 1.0}
    assert not v["naturalness"]["mean_non_decreasing"]
    lines = res.to_csv().splitlines()
    assert lines[0] == ",".join(pipeline.SweepResult.COLUMNS)
    assert lines[1].startswith("1,42,0.85,0.15")


def test_ablation_wins_count_ties():
    r = pipeline.AblationResult([0, 1, 2], np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.5, 3.5]))
    assert r.wins == 2


def test_sweep_runs_on_a_small_grid():
    cfg = pipeline.SweepConfig(n_seeds=1, n_links=(1, 5), train_samples=16, train_epochs=1, n_frames=1)
    res = pipeline.link_count_sweep(cfg)
    assert res.n_links == [1, 5] and res.steps == [42, 22]
    assert res.similarity.shape == (1, 2)
