"""Image quality metrics: total variation, SSIM and a BRISQUE-style naturalness score.

Images are grayscale float arrays on the 8-bit intensity scale [0, 255];
the MSCN stabilizer of 1 assumes that scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d, gaussian_filter
from scipy.special import gamma

from .csi import CsiError

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5
MSCN_SIGMA = 7 / 6
COV_REGULARIZATION = 1e-3
N_FEATURES = 36

# rho(alpha) = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)), tabulated for the moment-matching inverse
_ALPHAS = np.arange(0.2, 10.0005, 0.001)
_RHO = gamma(2 / _ALPHAS) ** 2 / (gamma(1 / _ALPHAS) * gamma(3 / _ALPHAS))


class MetricError(CsiError):
    pass


def to_gray(img) -> np.ndarray:
    """Float grayscale; RGB(A) inputs are reduced with luminance weights."""
    a = np.asarray(img, dtype=float)
    if a.ndim == 3:
        a = a[..., :3] @ LUMA
    if a.ndim != 2:
        raise MetricError(f"expected a 2-D image, got shape {np.shape(img)}")
    return a


def total_variation(img) -> float:
    """Mean of |dx| + |dy| over pixels that have both forward neighbours."""
    a = to_gray(img)
    if min(a.shape) < 2:
        raise MetricError("total variation needs an image of at least 2 x 2")
    dx = np.abs(a[:-1, 1:] - a[:-1, :-1])
    dy = np.abs(a[1:, :-1] - a[:-1, :-1])
    return float(np.mean(dx + dy))


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x**2 / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = correlate1d(correlate1d(a, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r:a.shape[0] - r, r:a.shape[1] - r]


def ssim(a, b) -> float:
    """Mean SSIM over all fully contained 11 x 11 Gaussian windows (sigma 1.5).

    The dynamic range is the joint value range of the two images.
    """
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise MetricError(f"image dimensions differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WIN:
        raise MetricError(f"SSIM needs images of at least {SSIM_WIN} x {SSIM_WIN}")
    L = max(x.max(), y.max()) - min(x.min(), y.min())
    if L == 0:
        L = 1.0
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    k = _gauss_kernel(SSIM_WIN, SSIM_SIGMA)
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return float(np.mean(s))


def mscn(img) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients, 7 x 7 Gaussian window."""
    a = to_gray(img)
    if min(a.shape) < 16:
        raise MetricError("MSCN needs an image of at least 16 x 16")
    kw = dict(sigma=MSCN_SIGMA, truncate=3 / MSCN_SIGMA, mode="reflect")
    mu = gaussian_filter(a, **kw)
    sigma = np.sqrt(np.abs(gaussian_filter(a * a, **kw) - mu * mu))
    return (a - mu) / (sigma + 1.0)


@dataclass
class AggdParams:
    alpha: float
    sigma_left: float
    sigma_right: float
    mean: float


def aggd_fit(samples) -> AggdParams:
    """Asymmetric generalized Gaussian fit by moment matching."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise MetricError(f"AGGD fit needs at least 100 samples, got {x.size}")
    left, right = x[x < 0], x[x > 0]
    if left.size == 0 or right.size == 0:
        raise MetricError("degenerate samples: need values on both sides of zero")
    sl = float(np.sqrt(np.mean(left**2)))
    sr = float(np.sqrt(np.mean(right**2)))
    g = sl / sr
    r = np.mean(np.abs(x)) ** 2 / np.mean(x**2)
    R = r * (g**3 + 1) * (g + 1) / (g**2 + 1) ** 2
    alpha = float(_ALPHAS[np.argmin((_RHO - R) ** 2)])
    scale = np.sqrt(gamma(1 / alpha) / gamma(3 / alpha))
    mean = (sr - sl) * scale * gamma(2 / alpha) / gamma(1 / alpha)
    return AggdParams(alpha, sl, sr, float(mean))


def _pair_products(m: np.ndarray):
    """Products with the horizontal, vertical and two diagonal neighbours."""
    return (
        m[:, :-1] * m[:, 1:],
        m[:-1, :] * m[1:, :],
        m[:-1, :-1] * m[1:, 1:],
        m[:-1, 1:] * m[1:, :-1],
    )


def _downsample(a: np.ndarray) -> np.ndarray:
    H, W = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
    return a[:H, :W].reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))


def naturalness_features(img) -> np.ndarray:
    """36 features: at two scales, the MSCN (shape, variance) and for each of
    four neighbour products (shape, mean, left variance, right variance)."""
    a = to_gray(img)
    out = []
    for _ in range(2):
        m = mscn(a)
        p = aggd_fit(m)
        out += [p.alpha, (p.sigma_left**2 + p.sigma_right**2) / 2]
        for prod in _pair_products(m):
            q = aggd_fit(prod)
            out += [q.alpha, q.mean, q.sigma_left**2, q.sigma_right**2]
        a = _downsample(a)
    return np.array(out)


@dataclass
class ReferenceStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, images) -> "ReferenceStats":
        f = np.stack([naturalness_features(i) for i in images])
        cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((f.shape[1], f.shape[1]))
        return cls(f.mean(axis=0), np.atleast_2d(cov))

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "cov": self.cov.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ReferenceStats":
        d = json.loads(text)
        return cls(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float))


def naturalness_score(img, ref: ReferenceStats) -> float:
    """Mahalanobis distance of the image's features from the reference corpus; higher is less natural."""
    f = naturalness_features(img)
    if ref.mean.shape != f.shape or ref.cov.shape != (f.size, f.size):
        raise MetricError("reference statistics do not match the 36-feature layout")
    c = ref.cov + COV_REGULARIZATION * np.eye(f.size)
    if not np.all(np.isfinite(c)) or np.linalg.cond(c) > 1e14:
        raise MetricError("reference covariance is singular after regularization")
    d = f - ref.mean
    return float(np.sqrt(max(d @ np.linalg.solve(c, d), 0.0)))


def procedural_corpus(n: int = 50, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    """Images in [0, 255] with a 1/f amplitude spectrum, the usual natural-image falloff."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    out = []
    for _ in range(n):
        beta = rng.uniform(0.9, 1.3)
        spec = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / f**beta
        spec[0, 0] = 0
        img = np.real(np.fft.ifft2(spec))
        img = 255 * (img - img.min()) / (img.max() - img.min())
        out.append(img)
    return out


_default_ref: ReferenceStats | None = None


def default_reference() -> ReferenceStats:
    """Reference statistics of the 50-image procedural corpus (computed once per process)."""
    global _default_ref
    if _default_ref is None:
        _default_ref = ReferenceStats.fit(procedural_corpus())
    return _default_ref
