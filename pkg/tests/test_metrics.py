import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csipose import metrics
from csipose.metrics import MetricError, ReferenceStats


@pytest.fixture(scope="module")
def corpus():
    return metrics.procedural_corpus(60, 64, seed=0)


@pytest.fixture(scope="module")
def train_ref(corpus):
    return ReferenceStats.fit(corpus[:50])


# --- total variation -------------------------------------------------------------

def test_tv_of_constant_is_zero():
    assert metrics.total_variation(np.full((8, 8), 42.0)) == 0.0


def test_tv_of_step_edge():
    img = np.zeros((4, 4))
    img[:, 2:] = 1.0
    # three of the nine inner pixels see the edge in x
    assert metrics.total_variation(img) == pytest.approx(1 / 3)


@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(-100, 100))
def test_tv_homogeneous_and_shift_invariant(seed, c, b):
    a = np.random.default_rng(seed).uniform(0, 255, (12, 9))
    tv = metrics.total_variation(a)
    assert metrics.total_variation(c * a) == pytest.approx(abs(c) * tv, rel=1e-9, abs=1e-9)
    assert metrics.total_variation(a + b) == pytest.approx(tv, rel=1e-9)


def test_tv_rgb_uses_luminance():
    g = np.random.default_rng(0).uniform(0, 255, (6, 6))
    rgb = np.repeat(g[..., None], 3, axis=-1)
    assert metrics.total_variation(rgb) == pytest.approx(metrics.total_variation(g))


def test_tv_needs_two_by_two():
    with pytest.raises(MetricError):
        metrics.total_variation(np.zeros((1, 5)))


# --- SSIM ----------------------------------------------------------------------

def test_ssim_identity(corpus):
    assert metrics.ssim(corpus[0], corpus[0]) == pytest.approx(1.0)


@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 255, (20, 20))
    b = a + rng.normal(0, 30, a.shape)
    s = metrics.ssim(a, b)
    assert s == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    assert -1 <= s <= 1


def test_ssim_independent_noise_near_zero():
    s = [metrics.ssim(np.random.default_rng(k).uniform(0, 255, (64, 64)),
                      np.random.default_rng(k + 1000).uniform(0, 255, (64, 64))) for k in range(100)]
    # oracle sweep: worst case 0.066
    assert np.max(np.abs(s)) < 0.1


def test_ssim_dimension_mismatch():
    with pytest.raises(MetricError, match="dimensions"):
        metrics.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ssim_too_small():
    with pytest.raises(MetricError):
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# --- MSCN and AGGD ---------------------------------------------------------------

def test_mscn_of_constant_is_zero():
    np.testing.assert_array_equal(metrics.mscn(np.full((32, 32), 77.0)), 0.0)


def test_mscn_mean_near_zero(corpus):
    means = [metrics.mscn(i).mean() for i in corpus[50:]]
    # oracle: worst held-out mean 3.6e-3
    assert np.max(np.abs(means)) < 0.05


def test_mscn_shift_invariant(corpus):
    np.testing.assert_allclose(metrics.mscn(corpus[1] + 40.0), metrics.mscn(corpus[1]), atol=1e-9)


def test_aggd_gaussian():
    p = metrics.aggd_fit(np.random.default_rng(0).standard_normal(20_000))
    assert p.alpha == pytest.approx(2.0, abs=0.2)
    assert p.sigma_left == pytest.approx(p.sigma_right, rel=0.1)
    assert p.mean == pytest.approx(0.0, abs=0.05)


def test_aggd_laplacian():
    p = metrics.aggd_fit(np.random.default_rng(1).laplace(size=20_000))
    assert p.alpha == pytest.approx(1.0, abs=0.15)


def test_aggd_mirror_swaps_sides():
    x = np.random.default_rng(2).standard_normal(5000)
    x[x > 0] *= 2.0
    p, q = metrics.aggd_fit(x), metrics.aggd_fit(-x)
    assert q.sigma_left == pytest.approx(p.sigma_right)
    assert q.sigma_right == pytest.approx(p.sigma_left)
    assert q.alpha == pytest.approx(p.alpha)
    assert q.mean == pytest.approx(-p.mean)
    assert p.mean > 0


def test_aggd_degenerate_samples():
    with pytest.raises(MetricError, match="degenerate"):
        metrics.aggd_fit(np.abs(np.random.default_rng(0).standard_normal(500)) + 0.1)
    with pytest.raises(MetricError):
        metrics.aggd_fit(np.ones(10))


def test_aggd_error_shrinks_with_samples():
    def err(n):
        return np.mean([abs(metrics.aggd_fit(np.random.default_rng(k).standard_normal(n)).alpha - 2)
                        for k in range(50)])
    # oracle: 0.114 at n = 1000 and 0.059 at n = 4000
    assert err(4000) < 0.7 * err(1000)


# --- naturalness -----------------------------------------------------------------

def test_feature_layout(corpus):
    f = metrics.naturalness_features(corpus[0])
    assert f.shape == (metrics.N_FEATURES,)
    assert np.all(np.isfinite(f))


def test_held_out_corpus_images_look_natural(corpus, train_ref):
    train = [metrics.naturalness_score(i, train_ref) for i in corpus[:50]]
    held = [metrics.naturalness_score(i, train_ref) for i in corpus[50:]]
    # oracle: 90th percentile 3.36, held-out scores 1.79 to 3.21
    assert np.all(np.array(held) < np.percentile(train, 90))


def test_noise_makes_images_less_natural(corpus, train_ref):
    img = corpus[50]
    noisy = np.clip(img + np.random.default_rng(0).normal(0, 40, img.shape), 0, 255)
    assert metrics.naturalness_score(noisy, train_ref) > metrics.naturalness_score(img, train_ref)


def test_own_reference_scores_zero(corpus):
    ref = ReferenceStats.fit([corpus[3]])
    assert metrics.naturalness_score(corpus[3], ref) == pytest.approx(0.0, abs=1e-9)


def test_reference_json_round_trip(train_ref, corpus):
    back = ReferenceStats.from_json(train_ref.to_json())
    np.testing.assert_array_equal(back.mean, train_ref.mean)
    np.testing.assert_array_equal(back.cov, train_ref.cov)
    assert metrics.naturalness_score(corpus[55], back) == metrics.naturalness_score(corpus[55], train_ref)


def test_mismatched_reference_rejected(corpus):
    with pytest.raises(MetricError):
        metrics.naturalness_score(corpus[0], ReferenceStats(np.zeros(3), np.eye(3)))


def test_corpus_range_and_determinism():
    a = metrics.procedural_corpus(3, 32, seed=5)
    b = metrics.procedural_corpus(3, 32, seed=5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
        assert x.min() == 0 and x.max() == pytest.approx(255)


def test_to_gray_rejects_1d():
    with pytest.raises(MetricError):
        metrics.to_gray(np.zeros(5))
