import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from csipose import csi, formats, synth
from csipose.csi import CsiError, CsiFrame, CsiStream, Link, RadioConfig


def _stream(h, radio, fs=100.0):
    t = np.arange(h.shape[0]) / fs
    return CsiStream(h, t, radio)


def _still_trace(n=300, pos=(3.0, 2.0)):
    t = np.arange(n) / 100.0
    return synth.straight_walk(t, pos, 0.0, 0.0)


# --- RadioConfig / containers -------------------------------------------------------

def test_default_radio_is_consistent(radio):
    assert radio.antenna_spacing_m == pytest.approx(radio.carrier_wavelength_m / 2)
    assert radio.carrier_hz == pytest.approx(5.32e9)


@pytest.mark.parametrize("override", [
    {"carrier_wavelength_m": -1.0},
    {"subcarrier_spacing_hz": 0.0},
    {"n_subcarriers": 3},
    {"n_rx_antennas": 1},
    {"antenna_spacing_m": 0.04},
    {"sample_rate_hz": 0.0},
])
def test_radio_rejects_invalid(override):
    with pytest.raises(CsiError):
        RadioConfig.default(**override)


def test_link_rejects_coincident_ends():
    with pytest.raises(CsiError):
        Link("x", (1.0, 1.0), (1.0, 1.0))


def test_frame_rejects_non_finite():
    with pytest.raises(CsiError):
        CsiFrame(np.array([[1.0, np.nan]]), 0.0, "a")


def test_stream_needs_increasing_timestamps(small_radio):
    h = np.ones((3, 8, 3))
    with pytest.raises(CsiError):
        CsiStream(h, np.array([0.0, 0.0, 0.1]), small_radio)


# --- sanitize_phase ---------------------------------------------------------------

def test_two_antenna_reference_is_identity():
    out = csi.sanitize_phase(CsiFrame(np.array([[1 + 0j, 0 + 1j]]), 0.0, "a"), 0)
    np.testing.assert_array_equal(out.h, [[1 + 0j, 0 + 1j]])


def test_common_phase_is_cancelled(rng):
    h = rng.standard_normal((30, 4)) + 1j * rng.standard_normal((30, 4))
    phi = rng.uniform(-np.pi, np.pi, size=(30, 1))
    a = csi.sanitize_phase(CsiFrame(h, 0.0, "a")).h
    b = csi.sanitize_phase(CsiFrame(h * np.exp(1j * phi), 0.0, "a")).h
    assert np.max(np.abs(a - b)) < 1e-12


def test_reference_column_becomes_power(rng):
    h = rng.standard_normal((8, 3)) + 1j * rng.standard_normal((8, 3))
    out = csi.sanitize_phase(CsiFrame(h, 0.0, "a"), ref_antenna=2).h
    np.testing.assert_allclose(out[:, 2], np.abs(h[:, 2]) ** 2, atol=1e-12)


def test_zero_reference_names_the_subcarrier():
    h = np.ones((6, 2), dtype=complex)
    h[4, 0] = 0
    with pytest.raises(CsiError, match="subcarrier 4"):
        csi.sanitize_phase(CsiFrame(h, 0.0, "a"))


def test_reference_out_of_range():
    with pytest.raises(CsiError):
        csi.sanitize_phase(CsiFrame(np.ones((4, 2)), 0.0, "a"), ref_antenna=2)


def test_cfo_drift_removed_by_sanitizing(radio):
    scene = synth.Scene([Link("rx1", (0.0, 0.0), (6.0, 0.0))], [synth.Scatterer((3.0, -2.5), 0.6)], radio)
    streams, _ = synth.render_csi(scene, _still_trace(), "static")
    # 100 Hz would alias to whole turns at the 100 Hz frame rate
    drifted = synth.inject_impairments(streams["rx1"], cfo_hz=37.0)
    raw_phase = np.angle(drifted.h[:, 5, 1])
    assert np.ptp(np.unwrap(raw_phase)) > 10  # the drift is real before sanitizing
    clean = csi.sanitize_phase(drifted)
    phase = np.angle(clean.h[:, :, 1])
    assert np.max(np.abs(phase - phase[0])) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_sanitize_invariant_to_unit_phasors(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((5, 8, 3)) + 1j * rng.standard_normal((5, 8, 3)) + 0.1
    u = np.exp(1j * rng.uniform(-np.pi, np.pi, size=(5, 8, 1)))
    r = RadioConfig.default(n_subcarriers=8, n_rx_antennas=3)
    a = csi.sanitize_phase(_stream(h, r)).h
    b = csi.sanitize_phase(_stream(h * u, r)).h
    assert np.max(np.abs(a - b)) < 1e-12


# --- remove_static ------------------------------------------------------------------

def test_constant_stream_removed(small_radio):
    h = np.full((50, 8, 3), 0.3 - 2.1j)
    out = csi.remove_static(_stream(h, small_radio), 0.2)
    assert np.max(np.abs(out.h)) < 1e-12


def test_one_hertz_sinusoid_survives_one_second_window(small_radio):
    t = np.arange(1000) / 100.0
    s = np.sin(2 * np.pi * t)
    h = (2.0 + 1.0j + s)[:, None, None] * np.ones((1, 8, 3))
    out = csi.remove_static(_stream(h, small_radio), 1.0).h[:, 0, 0]
    # away from the truncated edge windows the residual is the sinusoid itself
    inner = slice(50, -50)
    ratio = np.mean(np.abs(out[inner]) ** 2) / np.mean(s[inner] ** 2)
    assert ratio == pytest.approx(1.0, abs=0.01)


def test_window_shorter_than_two_samples(small_radio):
    with pytest.raises(CsiError):
        csi.remove_static(_stream(np.ones((10, 8, 3)), small_radio), 0.01)


def test_static_removal_isolates_the_moving_reflection(radio):
    scene = synth.Scene([Link("rx1", (0.0, 0.0), (6.0, 0.0))], [synth.Scatterer((3.0, -2.5), 0.8)], radio)
    trace = synth.straight_walk(np.arange(400) / 100.0, (2.0, 3.0), -np.pi / 2, 0.5)
    full, _ = synth.render_csi(scene, trace, "full")
    moving, _ = synth.render_csi(scene, trace, "dynamic")
    res = csi.remove_static(full["rx1"], 1.0).h.ravel()
    d = moving["rx1"].h.ravel()
    corr = abs(np.vdot(res, d)) / (np.linalg.norm(res) * np.linalg.norm(d))
    # frozen from the oracle render: 0.99899
    assert corr > 0.95
    assert corr == pytest.approx(0.99899, abs=1e-4)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_remove_static_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    r = RadioConfig.default(n_subcarriers=4, n_rx_antennas=2)
    s1 = rng.standard_normal((40, 4, 2)) + 1j * rng.standard_normal((40, 4, 2))
    s2 = rng.standard_normal((40, 4, 2)) + 1j * rng.standard_normal((40, 4, 2))
    lhs = csi.remove_static(_stream(a * s1 + b * s2, r), 0.1).h
    rhs = a * csi.remove_static(_stream(s1, r), 0.1).h + b * csi.remove_static(_stream(s2, r), 0.1).h
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_moving_average_matches_direct_sums():
    x = np.arange(12, dtype=float) ** 2
    out = csi.centered_moving_average(x, 3)
    expected = [np.mean(x[max(0, i - 1):i + 2]) for i in range(12)]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_even_window_uses_half_weight_ends():
    x = np.arange(10, dtype=float)
    out = csi.centered_moving_average(x, 4)
    # interior sample 5: (0.5*3 + 4 + 5 + 6 + 0.5*7) / 4
    assert out[5] == pytest.approx(5.0)
    x = np.where(np.arange(10) == 7, 1.0, 0.0)
    assert csi.centered_moving_average(x, 4)[5] == pytest.approx(0.125)


# --- amp_phase ------------------------------------------------------------------------

def test_linear_phase_unwrapped():
    k = np.arange(30)
    h = np.exp(1j * 0.1 * k)[:, None] * np.ones((1, 3))
    amp, ph = csi.amp_phase(CsiFrame(h, 0.0, "a"))
    np.testing.assert_allclose(amp, 1.0)
    np.testing.assert_allclose(ph, 0.1 * k, atol=1e-12)


def test_all_ones_frame():
    amp, ph = csi.amp_phase(CsiFrame(np.ones((8, 4)), 0.0, "a"))
    np.testing.assert_array_equal(amp, np.ones(8))
    np.testing.assert_array_equal(ph, np.zeros(8))


def test_single_path_phase_slope(radio):
    tau = 37.5e-9
    h = synth.synthesize(radio, [tau], [0.2], [1.0])
    _, ph = csi.amp_phase(CsiFrame(h, 0.0, "a"))
    slope = np.polyfit(np.arange(radio.n_subcarriers), ph, 1)[0]
    assert slope == pytest.approx(-2 * np.pi * radio.subcarrier_spacing_hz * tau, abs=1e-6)


def test_steep_phase_ramp_unwraps():
    k = np.arange(20)
    h = np.exp(-1j * 2.5 * k)[:, None] * np.ones((1, 2))
    _, ph = csi.amp_phase(CsiFrame(h, 0.0, "a"))
    np.testing.assert_allclose(np.diff(ph), -2.5, atol=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-50, 50)))
def test_unwrap_keeps_steps_within_pi(phase):
    out = csi.unwrap_phase(phase)
    assert np.all(np.abs(np.diff(out)) <= np.pi + 1e-9)
    # only whole turns are added
    turns = (out - phase) / (2 * np.pi)
    np.testing.assert_allclose(turns, np.rint(turns), atol=1e-9)


# --- persistence ----------------------------------------------------------------

def test_csb1_round_trip(tmp_path, small_radio, rng):
    h = (rng.standard_normal((5, 8, 3)) + 1j * rng.standard_normal((5, 8, 3))).astype(np.complex64)
    s = CsiStream(h, np.arange(5) * 0.01, small_radio, "rx7")
    p = tmp_path / "a.csb"
    formats.write_csb1(p, s)
    back = formats.read_csb1(p, "rx7")
    np.testing.assert_array_equal(back.h, h)
    np.testing.assert_array_equal(back.timestamps, s.timestamps)
    assert back.config.n_subcarriers == 8 and back.config.n_rx_antennas == 3
    assert back.config.sample_rate_hz == small_radio.sample_rate_hz
    assert back.config.subcarrier_spacing_hz == small_radio.subcarrier_spacing_hz


def test_csb1_header_layout(small_radio):
    s = CsiStream(np.ones((2, 8, 3)), np.array([0.0, 0.01]), small_radio)
    data = formats.csb1_bytes(s)
    assert data[:4] == b"CSB1"
    assert len(data) == 4 + 4 + 4 + 3 * 8 + 2 * (8 + 8 * 3 * 2 * 4)


def test_csb1_rejects_bad_magic_and_truncation(tmp_path, small_radio):
    data = formats.csb1_bytes(CsiStream(np.ones((2, 8, 3)), np.array([0.0, 0.01]), small_radio))
    (tmp_path / "bad.csb").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CsiError, match="magic"):
        formats.read_csb1(tmp_path / "bad.csb")
    (tmp_path / "short.csb").write_bytes(data[:-3])
    with pytest.raises(CsiError, match="frames"):
        formats.read_csb1(tmp_path / "short.csb")


def test_csv_export_columns(small_radio):
    s = CsiStream(np.full((2, 8, 3), 1 - 2j), np.array([0.0, 0.01]), small_radio)
    lines = formats.csv_text(s).splitlines()
    assert lines[0] == "t,k,a,re,im"
    assert len(lines) == 1 + 2 * 8 * 3
    assert lines[1] == "0.0,0,0,1.0,-2.0"
