import os

import numpy as np
import pytest

from csipose import formats, synth
from csipose.csi import CsiError, RadioConfig


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    formats.atomic_write(p, "one")
    formats.atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    assert os.listdir(p.parent) == ["f.txt"]


def test_atomic_write_failure_keeps_old_file(tmp_path):
    p = tmp_path / "f.txt"
    formats.atomic_write(p, "keep")
    with pytest.raises(TypeError):
        formats.atomic_write(p, 12345)
    assert p.read_text() == "keep"
    assert os.listdir(tmp_path) == ["f.txt"]


def test_scene_round_trip(tmp_path):
    scene, _ = synth.preset_scenario("case_study_5rx", 3)
    formats.write_json(tmp_path / "s.json", formats.scene_to_dict(scene))
    back = formats.scene_from_dict(formats.read_json(tmp_path / "s.json"))
    assert [l.id for l in back.links] == [l.id for l in scene.links]
    for a, b in zip(back.links, scene.links):
        np.testing.assert_array_equal(a.tx, b.tx)
        np.testing.assert_array_equal(a.rx, b.rx)
    assert [s.reflectivity for s in back.statics] == [s.reflectivity for s in scene.statics]
    assert back.radio == scene.radio and back.seed == scene.seed


def test_trace_round_trip(tmp_path):
    _, trace = synth.preset_scenario("torso_arm_ambiguity", 1, duration_s=0.3)
    formats.write_json(tmp_path / "t.json", formats.trace_to_dict(trace))
    back = formats.trace_from_dict(formats.read_json(tmp_path / "t.json"))
    for name in ("times", "user_pos", "orientation", "joints", "keypoints", "reflectivity"):
        np.testing.assert_array_equal(getattr(back, name), getattr(trace, name))


def test_malformed_documents():
    with pytest.raises(CsiError, match="scene"):
        formats.scene_from_dict({"links": [{"id": "a"}]})
    with pytest.raises(CsiError, match="trace"):
        formats.trace_from_dict({"times": [0.0]})
    with pytest.raises(CsiError, match="radio"):
        formats.radio_from_dict({"warp": 9})


def test_radio_partial_dict_uses_defaults():
    r = formats.radio_from_dict({"n_subcarriers": 16})
    assert r.n_subcarriers == 16
    assert r.n_rx_antennas == RadioConfig.default().n_rx_antennas


def test_invalid_json(tmp_path):
    (tmp_path / "x.json").write_text("{oops")
    with pytest.raises(CsiError, match="invalid JSON"):
        formats.read_json(tmp_path / "x.json")


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_image_round_trip(tmp_path, rng, suffix):
    img = rng.integers(0, 256, (13, 21)).astype(float)
    formats.write_image(tmp_path / f"i{suffix}", img)
    np.testing.assert_array_equal(formats.read_image(tmp_path / f"i{suffix}"), img)


def test_image_is_clipped_and_rounded(tmp_path):
    formats.write_image(tmp_path / "i.png", np.array([[-5.0, 0.4], [254.6, 300.0]]))
    np.testing.assert_array_equal(formats.read_image(tmp_path / "i.png"), [[0, 0], [255, 255]])
