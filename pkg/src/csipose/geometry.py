"""Multi-link localization, Fresnel-zone geometry and motion-axis estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .csi import SPEED_OF_LIGHT, CsiError, CsiStream, Link, centered_moving_average
from .spectral import LinkObservation


class UnderdeterminedError(CsiError):
    pass


class SingularityError(CsiError):
    pass


class NoMotionError(CsiError):
    pass


@dataclass
class PositionEstimate:
    pos: np.ndarray
    residual: float
    covariance: np.ndarray
    n_constraints: int
    converged: bool = True
    iterations: int = 0

    def to_json(self) -> dict:
        return {
            "pos": [float(v) for v in self.pos],
            "residual": float(self.residual),
            "covariance": self.covariance.tolist(),
            "n_constraints": self.n_constraints,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass
class FresnelIndex:
    n: float
    link_id: str


@dataclass
class OrientationEstimate:
    phi: float
    objective: float
    low_confidence: bool = False


# --- constraints ---------------------------------------------------------------

@dataclass
class _Constraint:
    kind: str  # "ellipse" or "bearing"
    link: Link
    value: float  # path length (m) or sin(AoA)
    weight: float


def _constraints(obs, links, use_aoa=True):
    by_id = {l.id: l for l in links}
    out = []
    tof_pw = [o.tof_power[0] for o in obs if o.tof_s and o.link_id in by_id]
    aoa_pw = [o.aoa_power[0] for o in obs if o.aoa_rad and o.link_id in by_id]
    tmax = max(tof_pw, default=1.0) or 1.0
    amax = max(aoa_pw, default=1.0) or 1.0
    for o in obs:
        link = by_id.get(o.link_id)
        if link is None:
            continue
        if o.tof_s:
            out.append(_Constraint("ellipse", link, SPEED_OF_LIGHT * o.tof_s[0], o.tof_power[0] / tmax))
        if use_aoa and o.aoa_rad:
            out.append(_Constraint("bearing", link, math.sin(o.aoa_rad[0]), o.aoa_power[0] / amax))
    return out


def _residuals(cons, u):
    """Residuals (m) and Jacobian for points u (..., 2)."""
    u = np.asarray(u, dtype=float)
    r = np.empty(u.shape[:-1] + (len(cons),))
    J = np.empty(u.shape[:-1] + (len(cons), 2))
    for i, c in enumerate(cons):
        if c.kind == "ellipse":
            v1, v2 = u - c.link.tx, u - c.link.rx
            n1 = np.linalg.norm(v1, axis=-1, keepdims=True)
            n2 = np.linalg.norm(v2, axis=-1, keepdims=True)
            r[..., i] = (n1 + n2)[..., 0] - c.value
            J[..., i, :] = v1 / np.maximum(n1, 1e-12) + v2 / np.maximum(n2, 1e-12)
        else:
            # a linear array sees sin(AoA) only, so both the ray in front of
            # the array and its mirror behind it satisfy the constraint
            ax = c.link.array_axis
            v = u - c.link.rx
            nv = np.linalg.norm(v, axis=-1, keepdims=True)
            r[..., i] = v @ ax - c.value * nv[..., 0]
            J[..., i, :] = ax - c.value * v / np.maximum(nv, 1e-12)
    return r, J


def locate_user(obs: list[LinkObservation], links: list[Link], init=None, use_aoa: bool = True,
                grid_step: float = 0.25, max_iter: int = 100, tol: float = 1e-6) -> PositionEstimate:
    """Power-weighted least-squares fit of ellipse and bearing constraints.

    Each link contributes its strongest delay (|TX-u| + |u-RX| = c tau) and,
    when present, its strongest bearing from the receive array. Solved by
    damped Gauss-Newton from the best point of a coarse grid.
    """
    cons = _constraints(obs, links, use_aoa)
    if len(cons) < 2:
        raise UnderdeterminedError(f"need at least 2 constraints, got {len(cons)}")
    w = np.array([c.weight for c in cons])

    def cost(u):
        r, _ = _residuals(cons, u)
        return np.sum(w * r**2, axis=-1)

    if init is None:
        pts = np.array([p for l in links for p in (l.tx_pos, l.rx_pos)])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        xs = np.arange(lo[0], hi[0] + grid_step / 2, grid_step)
        ys = np.arange(lo[1], hi[1] + grid_step / 2, grid_step)
        grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
        c = cost(grid)
        i, j = np.unravel_index(np.argmin(c), c.shape)
        u = grid[i, j].copy()
    else:
        u = np.asarray(init, dtype=float).copy()

    lam = 1e-3
    f = float(cost(u))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r, J = _residuals(cons, u)
        JtW = J.T * w
        A = JtW @ J
        g = JtW @ r
        step_ok = False
        while lam < 1e12:
            step = -np.linalg.solve(A + lam * np.diag(np.maximum(np.diag(A), 1e-12)), g)
            f_new = float(cost(u + step))
            if f_new <= f:
                u, f = u + step, f_new
                lam = max(lam / 3, 1e-12)
                step_ok = True
                break
            lam *= 4
        if not step_ok or np.linalg.norm(step) < tol:
            converged = True
            break

    r, J = _residuals(cons, u)
    A = (J.T * w) @ J
    dof = max(len(cons) - 2, 1)
    s2 = f / dof
    cov = s2 * np.linalg.pinv(A)
    cov = (cov + cov.T) / 2
    return PositionEstimate(u, float(f), cov, len(cons), converged, it)


# --- Fresnel zones ------------------------------------------------------------

def fresnel_index(p, link: Link, wavelength: float):
    """Continuous Fresnel zone index: excess path length in half wavelengths."""
    if not wavelength > 0:
        raise CsiError("wavelength must be positive")
    p = np.asarray(p, dtype=float)
    excess = np.linalg.norm(p - link.tx, axis=-1) + np.linalg.norm(p - link.rx, axis=-1) - link.length
    n = np.maximum(excess, 0.0) / (wavelength / 2)
    return FresnelIndex(float(n), link.id) if n.ndim == 0 else n


def boundary_normal(p, link: Link) -> np.ndarray:
    """Unit normal of the confocal ellipse through p (gradient of path length)."""
    p = np.asarray(p, dtype=float)
    v1, v2 = p - link.tx, p - link.rx
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise SingularityError(f"point coincides with a focus of link {link.id}")
    g = v1 / n1 + v2 / n2
    ng = np.linalg.norm(g)
    if ng < 1e-12:
        raise SingularityError(f"point lies on the segment of link {link.id}; normal undefined")
    return g / ng


def normal_angle(p, link: Link) -> float:
    """Angle of the boundary normal folded into [0, pi)."""
    n = boundary_normal(p, link)
    return float(np.mod(math.atan2(n[1], n[0]), math.pi))


def _integers_between(a: float, b: float) -> int:
    lo, hi = min(a, b), max(a, b)
    return max(0, math.ceil(hi) - math.floor(lo) - 1)


def crossing_count(seg_start, seg_end, link: Link, wavelength: float) -> int:
    """Number of integer zone boundaries crossed along a straight segment.

    The index is convex along a line, so the segment splits into at most two
    monotone pieces at its minimum.
    """
    a = np.asarray(seg_start, dtype=float)
    b = np.asarray(seg_end, dtype=float)

    def n_at(s):
        return float(fresnel_index(a + s * (b - a), link, wavelength).n)

    n0, n1 = n_at(0.0), n_at(1.0)
    res = minimize_scalar(n_at, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-10})
    s_min, n_min = float(res.x), float(res.fun)
    if n_min >= min(n0, n1) - 1e-12 or s_min <= 1e-9 or s_min >= 1 - 1e-9:
        return _integers_between(n0, n1)
    return _integers_between(n0, n_min) + _integers_between(n_min, n1)


# --- motion axis --------------------------------------------------------------

def link_fluctuation(stream: CsiStream, end_index: int | None = None, window_s: float = 1.0) -> float:
    """Variance of the antenna-mean amplitude at the strongest subcarrier over a window."""
    n = max(2, int(round(window_s * stream.config.sample_rate_hz)))
    end = len(stream) if end_index is None else int(end_index) + 1
    start = max(0, end - n)
    amp = np.abs(stream.h[start:end]).mean(axis=2)  # T x K
    k = int(np.argmax(amp.mean(axis=0)))
    return float(np.var(amp[:, k]))


def path_length_rate(stream: CsiStream, end_index: int | None = None, window_s: float = 1.0) -> float:
    """Signed rate (m/s) at which the reflected path length changes over a window.

    The static part is removed with a moving average over twice the window;
    the mean frame-to-frame rotation of what is left, summed over subcarriers
    and antennas, is converted to path length through the carrier wavelength.
    Magnitude tracks how fast zone boundaries are crossed, the sign whether
    the reflection moves outwards (positive) or inwards.
    """
    fs = stream.config.sample_rate_hz
    n = max(2, int(round(window_s * fs)))
    end = len(stream) if end_index is None else int(end_index) + 1
    part = stream.h[max(0, end - 2 * n):end]
    if len(part) < 3:
        raise CsiError("path length rate needs at least 3 frames")
    h = part - centered_moving_average(part, min(n, len(part)))
    h = h[-n:]
    rot = np.angle(np.sum(h[1:] * np.conj(h[:-1])))
    return float(-rot * fs * stream.config.carrier_wavelength_m / (2 * math.pi))


def _orientation_objective(phi, f_norm, betas, signed=False):
    c = np.cos(np.asarray(phi)[..., None] - betas)
    if not signed:
        m = np.abs(c)
        m = m / np.maximum(m.sum(axis=-1, keepdims=True), 1e-300)
        return np.sum((f_norm - m) ** 2, axis=-1)
    m = c / np.maximum(np.abs(c).sum(axis=-1, keepdims=True), 1e-300)
    # a motion axis has no direction: compare against both senses
    return np.minimum(np.sum((f_norm - m) ** 2, axis=-1), np.sum((f_norm + m) ** 2, axis=-1))


def estimate_orientation(fluct: dict, user_pos, links: list[Link], ambiguity_tol: float = 1e-3,
                         signed: bool = False) -> OrientationEstimate:
    """Motion-axis angle in [0, pi) that best explains per-link fluctuation.

    Predicted relative fluctuation on link l is |cos(phi - beta_l)|, beta_l
    being the boundary-normal angle at the user position. Grid search at 1
    degree, then golden-section refinement around the best grid point.

    With `signed`, the values are signed path-length rates (see
    path_length_rate) and the model is cos(phi - beta_l) with unfolded
    normals. The relative signs separate axes mirrored about a normal, which
    magnitudes alone cannot tell apart.
    """
    ids = [l.id for l in links if l.id in fluct]
    if len(ids) < 2:
        raise UnderdeterminedError("orientation needs fluctuation on at least 2 links")
    f = np.array([float(fluct[i]) for i in ids])
    if not signed and np.any(f < 0):
        raise CsiError("fluctuation variances must be nonnegative")
    if not np.any(f != 0):
        raise NoMotionError("all link fluctuations are zero")
    f_norm = f / np.abs(f).sum()
    by_id = {l.id: l for l in links}
    if signed:
        normals = np.array([boundary_normal(user_pos, by_id[i]) for i in ids])
        betas = np.arctan2(normals[:, 1], normals[:, 0])
    else:
        betas = np.array([normal_angle(user_pos, by_id[i]) for i in ids])

    def objective(p):
        return _orientation_objective(p, f_norm, betas, signed)

    grid = np.deg2rad(np.arange(180.0))
    obj = objective(grid)
    i0 = int(np.argmin(obj))
    step = grid[1] - grid[0]
    res = minimize_scalar(
        lambda p: float(objective(p)),
        bounds=(grid[i0] - step, grid[i0] + step), method="bounded", options={"xatol": 1e-9},
    )
    phi, best = (float(res.x), float(res.fun)) if res.fun <= obj[i0] else (float(grid[i0]), float(obj[i0]))
    phi = float(np.mod(phi, math.pi))

    # another well-separated minimum of (almost) the same depth means the axis is ambiguous
    spread = float(obj.max() - obj.min())
    far = np.abs(((grid - phi) + math.pi / 2) % math.pi - math.pi / 2) > np.deg2rad(10)
    rival = obj[far].min() if np.any(far) else np.inf
    low = spread < 1e-12 or (rival - best) <= ambiguity_tol * max(spread, 1e-300)
    return OrientationEstimate(phi, best, bool(low))
