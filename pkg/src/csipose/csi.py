"""CSI containers and the two sanitization passes.

Frames hold a K x A complex channel matrix (subcarrier x receive antenna).
Streams stack frames of one link in time order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

SPEED_OF_LIGHT = 299_792_458.0


class CsiError(ValueError):
    """Raised for malformed CSI input or invalid processing parameters."""


@dataclass(frozen=True)
class RadioConfig:
    carrier_wavelength_m: float
    subcarrier_spacing_hz: float
    n_subcarriers: int
    n_rx_antennas: int
    antenna_spacing_m: float
    sample_rate_hz: float
    noise_floor_db: float = -90.0

    def __post_init__(self):
        if not self.carrier_wavelength_m > 0:
            raise CsiError("carrier wavelength must be positive")
        if not self.subcarrier_spacing_hz > 0:
            raise CsiError("subcarrier spacing must be positive")
        if self.n_subcarriers < 4:
            raise CsiError("need at least 4 subcarriers")
        if self.n_rx_antennas < 2:
            raise CsiError("need at least 2 receive antennas")
        if not 0 < self.antenna_spacing_m <= self.carrier_wavelength_m / 2 * (1 + 1e-12):
            raise CsiError("antenna spacing must lie in (0, wavelength/2]")
        if not self.sample_rate_hz > 0:
            raise CsiError("sample rate must be positive")

    @property
    def carrier_hz(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_wavelength_m

    @property
    def subcarrier_freqs_hz(self) -> np.ndarray:
        """Absolute frequency of each subcarrier, f_c + k * spacing."""
        return self.carrier_hz + np.arange(self.n_subcarriers) * self.subcarrier_spacing_hz

    @classmethod
    def default(cls, **overrides) -> "RadioConfig":
        # 5.32 GHz carrier, 30 subcarriers over ~75 MHz, 4-element half-wave array
        lam = SPEED_OF_LIGHT / 5.32e9
        params = dict(
            carrier_wavelength_m=lam,
            subcarrier_spacing_hz=2.5e6,
            n_subcarriers=30,
            n_rx_antennas=4,
            antenna_spacing_m=lam / 2,
            sample_rate_hz=100.0,
            noise_floor_db=-90.0,
        )
        params.update(overrides)
        if "carrier_wavelength_m" in overrides and "antenna_spacing_m" not in overrides:
            params["antenna_spacing_m"] = params["carrier_wavelength_m"] / 2
        return cls(**params)


@dataclass(frozen=True)
class Link:
    id: str
    tx_pos: tuple[float, float]
    rx_pos: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "tx_pos", tuple(float(v) for v in self.tx_pos))
        object.__setattr__(self, "rx_pos", tuple(float(v) for v in self.rx_pos))
        if np.allclose(self.tx_pos, self.rx_pos):
            raise CsiError(f"link {self.id}: tx and rx coincide")

    @property
    def tx(self) -> np.ndarray:
        return np.asarray(self.tx_pos)

    @property
    def rx(self) -> np.ndarray:
        return np.asarray(self.rx_pos)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.tx - self.rx))

    @property
    def broadside(self) -> np.ndarray:
        """Unit vector the receive array faces (towards the transmitter)."""
        v = self.tx - self.rx
        return v / np.linalg.norm(v)

    @property
    def array_axis(self) -> np.ndarray:
        """Unit vector along which antenna index increases.

        Broadside rotated by -90 degrees, so a source on the +axis side has
        positive angle of arrival.
        """
        b = self.broadside
        return np.array([b[1], -b[0]])


@dataclass(frozen=True)
class CsiFrame:
    h: np.ndarray
    timestamp_s: float
    link_id: str

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim != 2:
            raise CsiError("CSI frame must be a K x A matrix")
        if not np.all(np.isfinite(h)):
            raise CsiError(f"non-finite CSI entry in frame at t={self.timestamp_s}")
        object.__setattr__(self, "h", h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.h.shape


@dataclass
class CsiStream:
    """Time-ordered frames of one link.

    Stored as a dense (T, K, A) array; `frames` materializes CsiFrame views.
    """

    h: np.ndarray
    timestamps: np.ndarray
    config: RadioConfig
    link_id: str = "link0"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=complex)
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if self.h.ndim != 3:
            raise CsiError("stream array must be T x K x A")
        T, K, A = self.h.shape
        if (K, A) != (self.config.n_subcarriers, self.config.n_rx_antennas):
            raise CsiError(f"frame shape {(K, A)} does not match radio config")
        if self.timestamps.shape != (T,):
            raise CsiError("one timestamp per frame required")
        if T > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise CsiError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.h.shape[0]

    def __getitem__(self, i: int) -> CsiFrame:
        return CsiFrame(self.h[i], float(self.timestamps[i]), self.link_id)

    @property
    def frames(self) -> list[CsiFrame]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_frames(cls, frames, config: RadioConfig, meta=None) -> "CsiStream":
        frames = list(frames)
        if not frames:
            raise CsiError("empty frame list")
        ids = {f.link_id for f in frames}
        if len(ids) != 1:
            raise CsiError(f"frames from several links: {sorted(ids)}")
        return cls(
            np.stack([f.h for f in frames]),
            np.array([f.timestamp_s for f in frames]),
            config,
            frames[0].link_id,
            dict(meta or {}),
        )

    def with_h(self, h: np.ndarray) -> "CsiStream":
        return replace(self, h=h, meta=dict(self.meta))


def _conj_multiply(h: np.ndarray, ref_antenna: int, t_label=None) -> np.ndarray:
    # h: (..., K, A)
    A = h.shape[-1]
    if not 0 <= ref_antenna < A:
        raise CsiError(f"reference antenna {ref_antenna} out of range [0, {A})")
    ref = h[..., ref_antenna]
    zero = np.abs(ref) == 0
    if np.any(zero):
        k = int(np.argwhere(zero)[0][-1])
        where = f" (t={t_label})" if t_label is not None else ""
        raise CsiError(f"degenerate reference: zero magnitude at subcarrier {k}{where}")
    return h * np.conj(ref)[..., None]


def sanitize_phase(frame, ref_antenna: int = 0):
    """Cancel per-subcarrier phase offsets common to all antennas.

    Each antenna column is multiplied by the conjugate of the reference
    column; the reference column becomes |h_ref|^2. Accepts a CsiFrame or a
    CsiStream.
    """
    if isinstance(frame, CsiStream):
        return frame.with_h(_conj_multiply(frame.h, ref_antenna))
    out = _conj_multiply(frame.h, ref_antenna, frame.timestamp_s)
    return CsiFrame(out, frame.timestamp_s, frame.link_id)


def _ma_kernel(n: int) -> np.ndarray:
    # even lengths use the 2 x n form: n + 1 taps with half-weight ends, so the filter stays centred
    if n % 2:
        k = np.ones(n)
    else:
        k = np.ones(n + 1)
        k[[0, -1]] = 0.5
    return k / k.sum()


def centered_moving_average(x: np.ndarray, n: int) -> np.ndarray:
    """Centered moving average along axis 0 over an n-sample window.

    At the stream edges the window is truncated and its weights renormalized.
    """
    k = _ma_kernel(n)
    x = np.asarray(x)
    ones = np.ones(x.shape[0])
    norm = correlate1d(ones, k, mode="constant").reshape((-1,) + (1,) * (x.ndim - 1))

    def avg(v):
        return correlate1d(v, k, axis=0, mode="constant") / norm

    if np.iscomplexobj(x):
        return avg(x.real) + 1j * avg(x.imag)
    return avg(x.astype(float))


def remove_static(stream: CsiStream, window_s: float = 1.0) -> CsiStream:
    """Subtract the centered moving average (length window_s) from every entry."""
    if len(stream) == 0:
        raise CsiError("empty stream")
    n = int(round(window_s * stream.config.sample_rate_hz))
    if n < 2:
        raise CsiError(f"static-removal window {window_s}s is shorter than 2 samples")
    return stream.with_h(stream.h - centered_moving_average(stream.h, n))


def unwrap_phase(phase: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unwrap so successive differences fall in (-pi, pi]."""
    phase = np.asarray(phase, dtype=float)
    d = np.diff(phase, axis=axis)
    wrapped = np.pi - np.mod(np.pi - d, 2 * np.pi)
    corr = np.cumsum(wrapped - d, axis=axis)
    out = phase.copy()
    sl = [slice(None)] * phase.ndim
    sl[axis] = slice(1, None)
    out[tuple(sl)] += corr
    return out


def amp_phase(frame) -> tuple[np.ndarray, np.ndarray]:
    """Per-subcarrier amplitude (antenna mean) and unwrapped circular-mean phase.

    Works on a single frame (returns length-K vectors) or on a stream / raw
    (T, K, A) array (returns T x K arrays).
    """
    h = frame.h if isinstance(frame, (CsiFrame, CsiStream)) else np.asarray(frame)
    mag = np.abs(h)
    amplitude = mag.mean(axis=-1)
    unit = np.divide(h, mag, out=np.zeros_like(h), where=mag > 0)
    phase = np.angle(unit.mean(axis=-1))
    return amplitude, unwrap_phase(phase, axis=-1)
