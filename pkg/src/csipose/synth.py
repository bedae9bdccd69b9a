"""Synthetic multipath CSI with full ground truth.

Planar ray model: one direct path per link plus one single-bounce path per
scatterer (static reflectors and body joints). Every estimator in the
package is checked against what this module renders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body
from .csi import SPEED_OF_LIGHT, CsiError, CsiStream, Link, RadioConfig

PRESETS = ("case_study_5rx", "single_link_walk", "torso_arm_ambiguity")

# amplitude reference for single-bounce paths, metres
REFLECTION_SCALE = 0.5


class GeometryError(CsiError):
    pass


@dataclass(frozen=True)
class Scatterer:
    pos: tuple[float, float]
    reflectivity: complex
    kind: str = "static"  # "static" or "body"
    joint: int | None = None

    def __post_init__(self):
        if abs(self.reflectivity) > 1:
            raise CsiError("scatterer reflectivity magnitude must be <= 1")
        if self.kind not in ("static", "body"):
            raise CsiError(f"unknown scatterer kind {self.kind!r}")


@dataclass
class Scene:
    links: list[Link]
    statics: list[Scatterer]
    radio: RadioConfig
    seed: int = 0

    def __post_init__(self):
        if not self.links:
            raise CsiError("scene needs at least one link")

    def link(self, link_id: str) -> Link:
        for l in self.links:
            if l.id == link_id:
                return l
        raise KeyError(link_id)

    def bounds(self, margin: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        pts = np.array([p for l in self.links for p in (l.tx_pos, l.rx_pos)])
        return pts.min(axis=0) - margin, pts.max(axis=0) + margin


@dataclass
class MotionTrace:
    times: np.ndarray
    user_pos: np.ndarray  # T x 2
    orientation: np.ndarray  # T, radians in [0, 2pi)
    joints: np.ndarray  # T x J x 2, floor plane
    keypoints: np.ndarray | None = None  # T x J x 2, skeleton image pixels
    reflectivity: np.ndarray | None = None  # J

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.user_pos = np.asarray(self.user_pos, dtype=float)
        self.orientation = np.mod(np.asarray(self.orientation, dtype=float), 2 * np.pi)
        self.joints = np.asarray(self.joints, dtype=float)
        T = len(self.times)
        if T == 0:
            raise CsiError("empty motion trace")
        if self.user_pos.shape != (T, 2) or self.orientation.shape != (T,):
            raise CsiError("motion arrays disagree on length")
        if self.joints.ndim != 3 or self.joints.shape[0] != T or self.joints.shape[2] != 2:
            raise CsiError("joints must be T x J x 2")
        if self.reflectivity is None:
            J = self.joints.shape[1]
            self.reflectivity = (
                body.JOINT_REFLECTIVITY.copy() if J == body.N_JOINTS else np.full(J, 0.5)
            )
        self.reflectivity = np.asarray(self.reflectivity)
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=float)

    def __len__(self):
        return len(self.times)

    @property
    def n_joints(self) -> int:
        return self.joints.shape[1]

    def skeleton(self, i: int, height: int = 32, width: int = 32) -> body.SkeletonFrame:
        if self.keypoints is None:
            raise CsiError("trace carries no image keypoints")
        return body.SkeletonFrame.from_keypoints(self.keypoints[i], height, width)


@dataclass
class PathSet:
    """Per-timestep path parameters of one link. Column 0 is the direct path."""

    tof_s: np.ndarray  # T x P
    aoa_rad: np.ndarray  # T x P
    gain: np.ndarray  # T x P complex
    kinds: list[str] = field(default_factory=list)


@dataclass
class GroundTruth:
    paths: dict[str, PathSet]
    user_pos: np.ndarray
    orientation: np.ndarray
    motion: MotionTrace

    def skeleton(self, i: int, height: int = 32, width: int = 32) -> body.SkeletonFrame:
        return self.motion.skeleton(i, height, width)


def _bounce_geometry(link: Link, pts: np.ndarray):
    """Delay, sin(AoA) and path-length product for single-bounce points (... x 2)."""
    d1 = np.linalg.norm(pts - link.tx, axis=-1)
    d2 = np.linalg.norm(pts - link.rx, axis=-1)
    if np.any(d1 < 1e-6) or np.any(d2 < 1e-6):
        raise GeometryError(f"link {link.id}: scatterer coincides with tx or rx")
    tof = (d1 + d2) / SPEED_OF_LIGHT
    sin_aoa = ((pts - link.rx) @ link.array_axis) / d2
    return tof, np.clip(sin_aoa, -1.0, 1.0), d1 * d2


def link_paths(link: Link, statics, motion: MotionTrace, mode: str = "full") -> PathSet:
    """Path parameters of one link over the whole trace.

    mode "full": direct + statics + body joints; "dynamic": body joints only
    (absolute-delay calibrated view of the user reflection); "static": no body.
    """
    if mode not in ("full", "dynamic", "static"):
        raise CsiError(f"unknown render mode {mode!r}")
    T = len(motion)
    cols_tof, cols_aoa, cols_gain, kinds = [], [], [], []
    if mode != "dynamic":
        cols_tof.append(np.full((T, 1), link.length / SPEED_OF_LIGHT))
        cols_aoa.append(np.zeros((T, 1)))
        cols_gain.append(np.full((T, 1), 1.0 / link.length, dtype=complex))
        kinds.append("direct")
        if statics:
            pts = np.array([s.pos for s in statics], dtype=float)
            rho = np.array([s.reflectivity for s in statics], dtype=complex)
            tof, sa, prod = _bounce_geometry(link, pts)
            cols_tof.append(np.tile(tof, (T, 1)))
            cols_aoa.append(np.tile(np.arcsin(sa), (T, 1)))
            cols_gain.append(np.tile(rho * REFLECTION_SCALE / prod, (T, 1)))
            kinds += ["static"] * len(statics)
    if mode != "static":
        tof, sa, prod = _bounce_geometry(link, motion.joints)
        cols_tof.append(tof)
        cols_aoa.append(np.arcsin(sa))
        cols_gain.append(motion.reflectivity[None, :] * REFLECTION_SCALE / prod + 0j)
        kinds += [f"body:{j}" for j in range(motion.n_joints)]
    return PathSet(
        np.concatenate(cols_tof, axis=1),
        np.concatenate(cols_aoa, axis=1),
        np.concatenate(cols_gain, axis=1),
        kinds,
    )


def synthesize(radio: RadioConfig, tof_s, aoa_rad, gain) -> np.ndarray:
    """CSI from explicit path parameters.

    Inputs are (..., P); output is (..., K, A) with
    h[k, a] = sum_p g_p exp(-j 2pi f_k tau_p) exp(j 2pi (d/lambda) a sin(theta_p)).
    """
    tof = np.asarray(tof_s, dtype=float)
    sa = np.sin(np.asarray(aoa_rad, dtype=float))
    g = np.asarray(gain, dtype=complex)
    a = np.arange(radio.n_rx_antennas)
    k = np.arange(radio.n_subcarriers)
    # phase in cycles; carrier term reduced modulo one cycle first
    ph_c = np.mod(radio.carrier_hz * tof, 1.0)
    ph_k = ph_c[..., None, :] + k[:, None] * radio.subcarrier_spacing_hz * tof[..., None, :]
    ek = np.exp(-2j * np.pi * ph_k)  # (..., K, P)
    ea = np.exp(2j * np.pi * (radio.antenna_spacing_m / radio.carrier_wavelength_m) * a[:, None] * sa[..., None, :])
    return np.einsum("...p,...kp,...ap->...ka", g, ek, ea)


def render_csi(scene: Scene, motion: MotionTrace, mode: str = "full"):
    """Render every link of the scene over the motion trace.

    Returns ({link_id: CsiStream}, GroundTruth).
    """
    streams, paths = {}, {}
    for link in scene.links:
        ps = link_paths(link, scene.statics, motion, mode)
        h = synthesize(scene.radio, ps.tof_s, ps.aoa_rad, ps.gain)
        streams[link.id] = CsiStream(h, motion.times.copy(), scene.radio, link.id, {"mode": mode})
        paths[link.id] = ps
    return streams, GroundTruth(paths, motion.user_pos, motion.orientation, motion)


def link_seed(seed: int, link_index: int) -> int:
    """Per-link worker seed: seed XOR link index."""
    return int(seed) ^ int(link_index)


def inject_impairments(stream: CsiStream, cfo_hz: float = 0.0, snr_db: float = np.inf, seed: int = 0) -> CsiStream:
    """Apply carrier frequency offset and complex white noise at the given SNR.

    Noise power is set per frame relative to that frame's mean entry power.
    """
    if np.isnan(snr_db):
        raise CsiError("snr_db must not be NaN")
    h = stream.h * np.exp(2j * np.pi * cfo_hz * stream.timestamps)[:, None, None]
    if np.isfinite(snr_db):
        rng = np.random.default_rng(seed)
        p = np.mean(np.abs(stream.h) ** 2, axis=(1, 2), keepdims=True)
        sigma = np.sqrt(p * 10 ** (-snr_db / 10) / 2)
        h = h + sigma * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    out = stream.with_h(h)
    out.meta.update(cfo_hz=cfo_hz, snr_db=snr_db)
    return out


# --- presets -----------------------------------------------------------------

def _smooth_signal(rng, t, lo, hi, n_terms=3, fmin=0.15, fmax=0.9):
    """Band-limited random signal mapped into [lo, hi]."""
    s = np.zeros_like(t)
    for _ in range(n_terms):
        f = rng.uniform(fmin, fmax)
        s += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    s /= np.max(np.abs(s)) + 1e-12
    return lo + (hi - lo) * (s + 1) / 2


def _trace_from_poses(t, user_pos, orientation, poses, img_size=32):
    joints3d = np.stack([body.body_joints(p) for p in poses])
    floor = np.stack(
        [body.floor_positions(j, u, o) for j, u, o in zip(joints3d, user_pos, orientation)]
    )
    kps = np.stack([body.image_keypoints(j, img_size, img_size) for j in joints3d])
    return MotionTrace(t, user_pos, orientation, floor, kps, body.JOINT_REFLECTIVITY.copy())


def _five_rx_scene(radio, seed):
    tx = (0.0, 0.0)
    rxs = [(7.0, 1.0), (7.2, 4.6), (5.6, 7.0), (2.0, 7.2), (0.0, 5.2)]
    links = [Link(f"rx{i + 1}", tx, rx) for i, rx in enumerate(rxs)]
    statics = [
        Scatterer((3.5, -0.6), 0.5 + 0.2j),
        Scatterer((7.8, 7.6), -0.3 + 0.4j),
        Scatterer((-0.6, 2.8), 0.4),
    ]
    return Scene(links, statics, radio, seed)


def _arm_motion(rng, t, abd, flex, bend):
    return (
        _smooth_signal(rng, t, *abd),
        _smooth_signal(rng, t, *flex),
        _smooth_signal(rng, t, *bend),
    )


def _boxer_trace(rng, t, center, arm_ranges, sway=0.25, img_size=32):
    phi0 = rng.uniform(0, 2 * np.pi)
    orientation = phi0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.05, 0.1) * t + rng.uniform(0, 6.28))
    fwd = np.stack([np.cos(orientation), np.sin(orientation)], axis=1)
    bounce = sway * np.sin(2 * np.pi * rng.uniform(0.35, 0.6) * t + rng.uniform(0, 6.28))
    drift = 0.25 * np.stack(
        [np.sin(2 * np.pi * 0.04 * t + rng.uniform(0, 6.28)), np.sin(2 * np.pi * 0.05 * t + rng.uniform(0, 6.28))],
        axis=1,
    )
    user_pos = np.asarray(center) + drift + bounce[:, None] * fwd
    r = _arm_motion(rng, t, *arm_ranges)
    l = _arm_motion(rng, t, *arm_ranges)
    steps = _smooth_signal(rng, t, -0.25, 0.25)
    poses = [
        body.Pose((r[0][i], r[1][i], r[2][i]), (l[0][i], l[1][i], l[2][i]), steps[i], -steps[i])
        for i in range(len(t))
    ]
    return _trace_from_poses(t, user_pos, orientation, poses, img_size)


def straight_walk(t, start, heading, speed, pose: body.Pose | None = None, img_size=32) -> MotionTrace:
    """Rigid body translating along a straight line, facing its heading."""
    t = np.asarray(t, dtype=float)
    d = np.array([np.cos(heading), np.sin(heading)])
    user_pos = np.asarray(start, dtype=float) + speed * (t - t[0])[:, None] * d
    orientation = np.full(len(t), heading)
    pose = pose or body.Pose()
    return _trace_from_poses(t, user_pos, orientation, [pose] * len(t), img_size)


def preset_scenario(name: str, seed: int = 0, duration_s: float | None = None, radio: RadioConfig | None = None):
    """Deterministic (Scene, MotionTrace) for a named preset."""
    if name not in PRESETS:
        raise CsiError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    radio = radio or RadioConfig.default()
    rng = np.random.default_rng(seed)
    if name == "single_link_walk":
        duration_s = duration_s or 4.0
        t = np.arange(int(round(duration_s * radio.sample_rate_hz))) / radio.sample_rate_hz
        scene = Scene([Link("rx1", (0.0, 0.0), (6.0, 0.0))], [Scatterer((3.0, -2.5), 0.4)], radio, seed)
        x0 = 3.0 + rng.uniform(-0.5, 0.5)
        trace = straight_walk(t, (x0, 3.0), -np.pi / 2, 0.5)
        return scene, trace
    duration_s = duration_s or 10.0
    t = np.arange(int(round(duration_s * radio.sample_rate_hz))) / radio.sample_rate_hz
    scene = _five_rx_scene(radio, seed)
    center = rng.uniform(3.2, 3.8, size=2)
    if name == "case_study_5rx":
        # guard / punch / raise: arms swing well away from the torso
        arm_ranges = ((0.05, 1.3), (0.0, 1.5), (0.2, 1.8))
    else:
        # guard-like poses: elbows bend a lot but hands stay close to the torso
        arm_ranges = ((0.0, 0.3), (0.0, 0.3), (0.2, 2.4))
    return scene, _boxer_trace(rng, t, center, arm_ranges)
