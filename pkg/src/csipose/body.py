"""Parametric 14-joint body and the keypoint / heatmap representation.

Joints are built in a body frame (lateral, forward, up) in metres. The floor
projection (lateral, forward) drives the radio scene; the frontal view
(lateral, up) is what the skeleton image shows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
N_JOINTS = len(JOINT_NAMES)

BONES = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
)

# torso reflects more than limbs
JOINT_REFLECTIVITY = np.array(
    [0.15, 0.30, 0.22, 0.10, 0.07, 0.22, 0.10, 0.07, 0.25, 0.12, 0.06, 0.25, 0.12, 0.06]
)

UPPER_ARM = 0.30
FOREARM = 0.27
SHOULDER_HALF = 0.19
HIP_HALF = 0.11
SHOULDER_H = 1.42
HIP_H = 0.95
THIGH = 0.45
SHIN = 0.45


@dataclass
class Pose:
    """Joint angles in radians. Arms: (abduction, flexion, elbow bend) per side."""

    r_arm: tuple[float, float, float] = (0.1, 0.0, 0.2)
    l_arm: tuple[float, float, float] = (0.1, 0.0, 0.2)
    r_step: float = 0.0
    l_step: float = 0.0


def _arm(shoulder, side, abduction, flexion, bend):
    ca, sa = np.cos(abduction), np.sin(abduction)
    cf, sf = np.cos(flexion), np.sin(flexion)
    upper = np.array([side * sa * cf, sf, -ca * cf])
    upper /= np.linalg.norm(upper)
    elbow = shoulder + UPPER_ARM * upper
    # elbow bend swings the forearm towards forward/up
    fore = np.cos(bend) * upper + np.sin(bend) * np.array([0.0, np.cos(flexion), np.sin(flexion)])
    fore /= np.linalg.norm(fore)
    wrist = elbow + FOREARM * fore
    return elbow, wrist


def _leg(hip, step):
    knee = hip + THIGH * np.array([0.0, np.sin(step), -np.cos(step)])
    ankle = knee + SHIN * np.array([0.0, 0.5 * np.sin(step), -1.0])
    ankle[2] = max(ankle[2], 0.0)
    return knee, ankle


def body_joints(pose: Pose) -> np.ndarray:
    """J x 3 joint positions (lateral, forward, up) in the body frame."""
    j = np.zeros((N_JOINTS, 3))
    j[0] = (0.0, 0.0, 1.70)
    j[1] = (0.0, 0.0, 1.50)
    j[2] = (SHOULDER_HALF, 0.0, SHOULDER_H)
    j[5] = (-SHOULDER_HALF, 0.0, SHOULDER_H)
    j[3], j[4] = _arm(j[2], 1.0, *pose.r_arm)
    j[6], j[7] = _arm(j[5], -1.0, *pose.l_arm)
    j[8] = (HIP_HALF, 0.0, HIP_H)
    j[11] = (-HIP_HALF, 0.0, HIP_H)
    j[9], j[10] = _leg(j[8], pose.r_step)
    j[12], j[13] = _leg(j[11], pose.l_step)
    return j


def floor_positions(joints3d: np.ndarray, user_pos, orientation: float) -> np.ndarray:
    """Project body-frame joints onto the floor plane (J x 2, metres).

    The body's forward axis points along `orientation`.
    """
    fwd = np.array([np.cos(orientation), np.sin(orientation)])
    lat = np.array([np.sin(orientation), -np.cos(orientation)])
    return np.asarray(user_pos) + joints3d[:, :1] * lat + joints3d[:, 1:2] * fwd


def image_keypoints(joints3d: np.ndarray, height: int = 32, width: int = 32) -> np.ndarray:
    """Frontal-view keypoints in pixels, (x=column, y=row), body-centred."""
    scale = 0.8 * height / 1.9
    x = (width - 1) / 2 + joints3d[:, 0] * scale
    y = (height - 1) / 2 - (joints3d[:, 2] - 0.92) * scale
    return np.stack([x, y], axis=1)


def gaussian_heatmaps(keypoints: np.ndarray, height: int, width: int, sigma: float = 1.5) -> np.ndarray:
    """H x W x J heatmaps, each a Gaussian normalized to unit sum."""
    yy, xx = np.mgrid[0:height, 0:width]
    kp = np.asarray(keypoints, dtype=float)
    d2 = (xx[..., None] - kp[:, 0]) ** 2 + (yy[..., None] - kp[:, 1]) ** 2
    hm = np.exp(-d2 / (2 * sigma**2))
    return hm / hm.sum(axis=(0, 1), keepdims=True)


@dataclass
class SkeletonFrame:
    keypoints: np.ndarray
    heatmaps: np.ndarray
    off_frame: np.ndarray | None = None

    @classmethod
    def from_keypoints(cls, keypoints, height: int = 32, width: int = 32, sigma: float = 1.5):
        kp = np.asarray(keypoints, dtype=float)
        off = (kp[:, 0] < 0) | (kp[:, 0] > width - 1) | (kp[:, 1] < 0) | (kp[:, 1] > height - 1)
        return cls(kp, gaussian_heatmaps(kp, height, width, sigma), off)


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer pixels of the line from (x0, y0) to (x1, y1), endpoints included."""
    pts = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_skeleton(keypoints, height: int = 32, width: int = 32, bones=BONES, value: float = 255.0) -> np.ndarray:
    """Monochrome skeleton: 1-px bone lines and 3 x 3 joint dots on a zero background.

    Pixels falling outside the image are dropped.
    """
    kp = np.asarray(keypoints, dtype=float)
    if not np.all(np.isfinite(kp)):
        raise ValueError("keypoints must be finite")
    img = np.zeros((height, width))
    ij = np.rint(kp).astype(int)

    def put(x, y):
        if 0 <= x < width and 0 <= y < height:
            img[y, x] = value

    for a, b in bones:
        for x, y in bresenham(ij[a, 0], ij[a, 1], ij[b, 0], ij[b, 1]):
            put(x, y)
    for x, y in ij:
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                put(x + dx, y + dy)
    return img
