"""Location- and orientation-weighted link fusion and windowed network inputs."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .csi import CsiError, Link
from .geometry import normal_angle, SingularityError

MIN_LINK_DISTANCE = 0.1
ORIENTATION_FLOOR = 0.05
SIGMA_FLOOR = 1e-8


@dataclass
class WeightVector:
    weights: dict
    kind: str

    def __post_init__(self):
        w = np.array(list(self.weights.values()), dtype=float)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise CsiError("weights must be nonnegative and sum to 1")

    def __getitem__(self, link_id):
        return self.weights[link_id]

    def as_array(self, ids) -> np.ndarray:
        return np.array([self.weights[i] for i in ids])


def _normalize(raw: dict, kind: str) -> WeightVector:
    total = sum(raw.values())
    w = {k: v / total for k, v in raw.items()}
    # absorb rounding so the sum is exactly representable as 1
    first = next(iter(w))
    w[first] += 1.0 - sum(w.values())
    return WeightVector(w, kind)


def point_segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def distance_weights(user_pos, links: list[Link]) -> WeightVector:
    """w_l proportional to 1 / max(distance to link segment, 0.1 m)."""
    if not links:
        raise CsiError("need at least one link")
    raw = {
        l.id: 1.0 / max(point_segment_distance(user_pos, l.tx, l.rx), MIN_LINK_DISTANCE)
        for l in links
    }
    return _normalize(raw, "distance")


def orientation_weights(phi: float, user_pos, links: list[Link], floor: float = ORIENTATION_FLOOR) -> WeightVector:
    """w_l proportional to floor + |cos(phi - beta_l)|, beta_l the boundary-normal angle."""
    raw = {}
    for l in links:
        try:
            beta = normal_angle(user_pos, l)
            raw[l.id] = floor + abs(np.cos(phi - beta))
        except SingularityError:
            # on the segment every direction crosses zones equally
            raw[l.id] = floor + 1.0
    return _normalize(raw, "orientation")


def uniform_weights(links: list[Link]) -> WeightVector:
    return _normalize({l.id: 1.0 for l in links}, "uniform")


def fuse_links(per_link: dict, w: WeightVector) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of per-link (amplitude, phase) vectors.

    `per_link` maps link id to an (amplitude, phase) pair; arrays may carry
    leading time axes as long as every link agrees on shape.
    """
    if set(per_link) != set(w.weights):
        raise CsiError("weights must cover exactly the provided links")
    shapes = {np.shape(a) for a, _ in per_link.values()} | {np.shape(p) for _, p in per_link.values()}
    if len(shapes) != 1:
        raise CsiError(f"link vectors disagree in shape: {sorted(shapes)}")
    amp = sum(w[i] * np.asarray(a, dtype=float) for i, (a, _) in per_link.items())
    phase = sum(w[i] * np.asarray(p, dtype=float) for i, (_, p) in per_link.items())
    return amp, phase


@dataclass
class InputTensor:
    """T x K x C window, each channel standardized over the window."""

    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    t_index: int = 0

    def denormalize(self) -> np.ndarray:
        return self.x * self.std + self.mean


def normalize_window(raw: np.ndarray, t_index: int = 0) -> InputTensor:
    mean = raw.mean(axis=(0, 1))
    std = np.maximum(raw.std(axis=(0, 1)), SIGMA_FLOOR)
    return InputTensor((raw - mean) / std, mean, std, t_index)


def build_window(sequence: np.ndarray, T: int, stride: int = 1) -> list[InputTensor]:
    """Sliding T-step windows over a (L, K, C) feature sequence."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim == 2:
        seq = seq[..., None]
    if T < 1 or stride < 1:
        raise CsiError("window length and stride must be >= 1")
    if len(seq) < T:
        raise CsiError(f"sequence of length {len(seq)} shorter than window {T}")
    n = (len(seq) - T) // stride + 1
    return [normalize_window(seq[i * stride:i * stride + T], i * stride) for i in range(n)]


def stack_channels(*pairs) -> np.ndarray:
    """Stack (amplitude, phase) pairs of shape (L, K) into an (L, K, 2n) array."""
    return np.stack([v for pair in pairs for v in pair], axis=-1)


# --- FTW1 persistence ----------------------------------------------------------

_FTW_HEADER = struct.Struct("<4sIII I")


def write_ftw(path, windows: list[InputTensor]):
    """Windows as FTW1: header {magic, T, K, C, count}, then per window
    C f32 means, C f32 stds and T*K*C f32 values (row-major)."""
    if not windows:
        raise CsiError("no windows to write")
    T, K, C = windows[0].x.shape
    with open(path, "wb") as f:
        f.write(_FTW_HEADER.pack(b"FTW1", T, K, C, len(windows)))
        for w in windows:
            f.write(w.mean.astype("<f4").tobytes())
            f.write(w.std.astype("<f4").tobytes())
            f.write(w.x.astype("<f4").tobytes())


def read_ftw(path) -> list[InputTensor]:
    with open(path, "rb") as f:
        data = f.read()
    magic, T, K, C, count = _FTW_HEADER.unpack_from(data)
    if magic != b"FTW1":
        raise CsiError(f"not an FTW1 file: magic {magic!r}")
    off = _FTW_HEADER.size
    out = []
    for _ in range(count):
        mean = np.frombuffer(data, "<f4", C, off).astype(float)
        off += 4 * C
        std = np.frombuffer(data, "<f4", C, off).astype(float)
        off += 4 * C
        x = np.frombuffer(data, "<f4", T * K * C, off).astype(float).reshape(T, K, C)
        off += 4 * T * K * C
        out.append(InputTensor(x, mean, std))
    return out
