"""Matrix-pencil estimation of time of flight and angle of arrival."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .csi import CsiError, CsiFrame, RadioConfig

DEFAULT_THRESHOLD = 0.05


class OrderSelectionError(CsiError):
    pass


@dataclass
class PoleSet:
    poles: np.ndarray
    amplitudes: np.ndarray
    domain: str = "raw"
    residual: float = 0.0
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.poles)

    @property
    def powers(self) -> np.ndarray:
        a = np.abs(self.amplitudes) ** 2
        return a.mean(axis=0) if a.ndim == 2 else a


@dataclass
class LinkObservation:
    link_id: str
    timestamp_s: float
    tof_s: list[float] = field(default_factory=list)
    tof_power: list[float] = field(default_factory=list)
    aoa_rad: list[float] = field(default_factory=list)
    aoa_power: list[float] = field(default_factory=list)
    aoa_clamped: bool = False

    def to_json(self) -> dict:
        return {
            "link_id": self.link_id,
            "timestamp_s": self.timestamp_s,
            "tof_s": [float(v) for v in self.tof_s],
            "tof_power": [float(v) for v in self.tof_power],
            "aoa_rad": [float(v) for v in self.aoa_rad],
            "aoa_power": [float(v) for v in self.aoa_power],
            "aoa_clamped": bool(self.aoa_clamped),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LinkObservation":
        return cls(
            d["link_id"], float(d.get("timestamp_s", 0.0)),
            list(d.get("tof_s", [])), list(d.get("tof_power", [])),
            list(d.get("aoa_rad", [])), list(d.get("aoa_power", [])),
            bool(d.get("aoa_clamped", False)),
        )


def select_order(singular_values, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Number of singular values at or above threshold * sigma_0, at most len - 1."""
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0 or s[0] <= 0:
        return 0
    p = int(np.count_nonzero(s / s[0] >= threshold))
    return min(p, s.size - 1)


def hankel(x: np.ndarray, L: int) -> np.ndarray:
    """(N - L) x (L + 1) Hankel matrix, Y[i, j] = x[i + j]."""
    N = len(x)
    idx = np.arange(N - L)[:, None] + np.arange(L + 1)[None, :]
    return x[idx]


def matrix_pencil(x, L: int | None = None, order: int | str = "auto", threshold: float = DEFAULT_THRESHOLD) -> PoleSet:
    """Fit x[n] = sum_i a_i z_i^n by the SVD-truncated matrix pencil.

    `x` may be a single length-N vector or an S x N block of snapshots that
    share poles (their Hankel matrices are stacked). `order` is an integer
    model order or "auto" for threshold selection.
    """
    x = np.asarray(x, dtype=complex)
    snaps = x[None, :] if x.ndim == 1 else x
    N = snaps.shape[1]
    if N < 4:
        raise CsiError(f"matrix pencil needs at least 4 samples, got {N}")
    if not np.all(np.isfinite(snaps)):
        raise CsiError("non-finite samples")
    L = N // 2 if L is None else int(L)
    if not 2 <= L <= N - 2:
        raise CsiError(f"pencil parameter L={L} outside [2, {N - 2}]")

    Y = np.vstack([hankel(s, L) for s in snaps])
    _, sv, vh = np.linalg.svd(Y, full_matrices=False)
    if order == "auto":
        p = select_order(sv, threshold)
    else:
        p = int(order)
        if p > len(sv) - 1:
            raise OrderSelectionError(f"order {p} exceeds pencil capacity {len(sv) - 1}")
        if p > 0 and (sv[0] == 0 or sv[p - 1] / sv[0] < 1e-12):
            raise OrderSelectionError(f"data rank below requested order {p}")
    if p == 0:
        amps = np.zeros((snaps.shape[0], 0), dtype=complex)
        res = float(np.linalg.norm(snaps))
        return PoleSet(np.zeros(0, complex), amps if x.ndim == 2 else amps[0], residual=res, singular_values=sv)

    # Y0 = U S W0, Y1 = U S W1 on the rank-p subspace: poles = eig(pinv(W0) W1)
    vp = vh[:p]
    w0, w1 = vp[:, :-1], vp[:, 1:]
    poles = np.linalg.eigvals(w1 @ np.linalg.pinv(w0))

    V = poles[None, :] ** np.arange(N)[:, None]
    amps, *_ = np.linalg.lstsq(V, snaps.T, rcond=None)
    amps = amps.T
    res = float(np.linalg.norm(snaps - amps @ V.T))
    if not np.all(np.isfinite(amps)):
        raise OrderSelectionError("amplitude fit diverged")
    return PoleSet(poles, amps if x.ndim == 2 else amps[0], residual=res, singular_values=sv)


def tof_from_poles(poles, spacing_hz: float) -> np.ndarray:
    """tau = -angle(z) / (2 pi df), folded into [0, 1/df)."""
    period = 1.0 / spacing_hz
    tau = np.mod(-np.angle(poles) / (2 * np.pi * spacing_hz), period)
    # fold values sitting at the top edge back to zero
    tau[np.isclose(tau, period, rtol=0, atol=1e-9 * period)] = 0.0
    return tau


def estimate_tof(frame: CsiFrame, radio: RadioConfig, L: int | None = None, order="auto",
                 threshold: float = DEFAULT_THRESHOLD):
    """Delays (s) and powers from the subcarrier response, strongest first.

    Antenna columns are treated as snapshots of one shared pencil, so paths
    off broadside are not cancelled by a plain antenna average.
    """
    h = frame.h if isinstance(frame, CsiFrame) else np.asarray(frame)
    K = h.shape[0]
    if K < 8:
        raise CsiError(f"ToF estimation needs K >= 8 subcarriers, got {K}")
    ps = matrix_pencil(h.T, L, order, threshold)
    ps.domain = "tof"
    if len(ps) == 0:
        return np.zeros(0), np.zeros(0)
    tau = tof_from_poles(ps.poles, radio.subcarrier_spacing_hz)
    pw = ps.powers
    order_idx = np.argsort(-pw)
    return tau[order_idx], pw[order_idx]


def aoa_from_poles(poles, radio: RadioConfig):
    """theta = arcsin(angle(z) lambda / (2 pi d)); returns (theta, clamped flags)."""
    arg = np.angle(poles) * radio.carrier_wavelength_m / (2 * np.pi * radio.antenna_spacing_m)
    clamped = np.abs(arg) > 1
    return np.arcsin(np.clip(arg, -1.0, 1.0)), clamped


def estimate_aoa(frame: CsiFrame, radio: RadioConfig, L: int | None = None, threshold: float = DEFAULT_THRESHOLD):
    """Angles (rad), powers and a clamp flag from the antenna response.

    A pencil runs across antennas on every subcarrier; poles of equal rank
    (sorted by angle) are averaged as power-weighted phasors across
    subcarriers.
    """
    h = frame.h if isinstance(frame, CsiFrame) else np.asarray(frame)
    A = h.shape[1]
    if A < 2:
        raise CsiError("AoA estimation needs at least 2 antennas")
    if A < 4:
        # too short for a pencil: single-path phase-difference estimate
        phasor = np.sum(h[:, 1:] * np.conj(h[:, :-1]))
        if phasor == 0:
            return np.zeros(0), np.zeros(0), False
        theta, cl = aoa_from_poles(np.array([phasor]), radio)
        return theta, np.array([np.mean(np.abs(h) ** 2)]), bool(cl[0])
    L = A // 2 if L is None else L
    global_p = matrix_pencil(h, L, "auto", threshold)
    p = min(len(global_p), min(A - L, L + 1) - 1)
    if p == 0:
        return np.zeros(0), np.zeros(0), False
    acc = np.zeros(p, dtype=complex)
    pw = np.zeros(p)
    for k in range(h.shape[0]):
        try:
            ps = matrix_pencil(h[k], L, p)
        except OrderSelectionError:
            continue
        srt = np.argsort(np.angle(ps.poles))
        w = np.abs(ps.amplitudes[srt]) ** 2
        acc += w * ps.poles[srt] / np.abs(ps.poles[srt])
        pw += w
    good = pw > 0
    if not np.any(good):
        return np.zeros(0), np.zeros(0), False
    theta, clamped = aoa_from_poles(acc[good], radio)
    power = pw[good] / h.shape[0]
    idx = np.argsort(-power)
    return theta[idx], power[idx], bool(np.any(clamped))


def observe(frame: CsiFrame, radio: RadioConfig, **kw) -> LinkObservation:
    """Run both estimators on one frame."""
    tau, tpw = estimate_tof(frame, radio, **kw)
    theta, apw, clamped = estimate_aoa(frame, radio)
    return LinkObservation(frame.link_id, frame.timestamp_s, list(tau), list(tpw), list(theta), list(apw), clamped)
