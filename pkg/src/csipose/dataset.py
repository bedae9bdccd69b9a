"""Oracle training sets: synthetic CSI windows paired with ground-truth skeletons.

Each window runs the two sensing scales on the rendered links: the user is
located from background-subtracted CSI at the window's last frame, the
motion axis from per-link fluctuation over the preceding second, and the
resulting weights fuse the per-link amplitude/phase sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import body, csi, features, geometry, spectral, synth
from .skeleton_net import Dataset


@dataclass
class FeatureConfig:
    window: int = 16
    stride: int = 4
    snr_db: float = 20.0
    cfo_hz: float = 0.0
    multiscale: bool = True
    # "background_free": empty-room profile subtracted before feature extraction
    source: str = "background_free"
    image_hw: tuple[int, int] = (32, 32)

    @property
    def channels(self) -> int:
        return 4 if self.multiscale else 2


@dataclass
class ScaleEstimate:
    """Large- and small-scale results behind one window's link weights."""

    t_index: int
    user_pos: np.ndarray
    orientation: float
    weights: list = field(default_factory=list)


def link_sequences(streams: dict) -> dict:
    """Per-link (amplitude, phase) sequences, each T x K, from sanitized CSI."""
    return {lid: csi.amp_phase(csi.sanitize_phase(s)) for lid, s in streams.items()}


def _impaired(streams: dict, cfg: FeatureConfig, seed: int) -> dict:
    return {
        lid: synth.inject_impairments(s, cfg.cfo_hz, cfg.snr_db, synth.link_seed(seed, i))
        for i, (lid, s) in enumerate(streams.items())
    }


def estimate_scales(background_free: dict, links: list, radio, index: int) -> tuple[np.ndarray, float]:
    """User position and motion-axis angle at frame `index`."""
    if len(links) == 1:
        # a single link cannot localize; fall back to its midpoint
        link = links[0]
        return (link.tx + link.rx) / 2, 0.0
    obs = [spectral.observe(background_free[l.id][index], radio) for l in links]
    pos = geometry.locate_user(obs, links).pos
    rates = {l.id: geometry.path_length_rate(background_free[l.id], index) for l in links}
    try:
        phi = geometry.estimate_orientation(rates, pos, links, signed=True).phi
    except (geometry.NoMotionError, geometry.SingularityError):
        phi = 0.0
    return pos, phi


def window_inputs(seqs: dict, links: list, start: int, cfg: FeatureConfig,
                  user_pos=None, phi: float = 0.0) -> tuple[features.InputTensor, list]:
    """One normalized T x K x C window over frames [start, start + T)."""
    stop = start + cfg.window
    per_link = {l.id: (a[start:stop], p[start:stop]) for l in links for a, p in [seqs[l.id]]}
    if cfg.multiscale:
        weights = [features.distance_weights(user_pos, links),
                   features.orientation_weights(phi, user_pos, links)]
    else:
        weights = [features.uniform_weights(links)]
    pairs = [features.fuse_links(per_link, w) for w in weights]
    return features.normalize_window(features.stack_channels(*pairs), start), weights


def scenario_dataset(scene, trace, cfg: FeatureConfig, seed: int = 0, n_links: int | None = None,
                     n_windows: int | None = None):
    """Windows over one rendered scenario.

    Returns (Dataset, [ScaleEstimate]). Labels are the skeleton at each
    window's last frame.
    """
    if cfg.source not in ("background_free", "raw"):
        raise csi.CsiError(f"unknown feature source {cfg.source!r}")
    links = scene.links[:n_links] if n_links else list(scene.links)
    dyn, _ = synth.render_csi(scene, trace, "dynamic")
    dyn = _impaired({l.id: dyn[l.id] for l in links}, cfg, seed + 7919)
    if cfg.source == "background_free":
        seqs = link_sequences(dyn)
    else:
        full, _ = synth.render_csi(scene, trace, "full")
        seqs = link_sequences(_impaired({l.id: full[l.id] for l in links}, cfg, seed))

    total = (len(trace) - cfg.window) // cfg.stride + 1
    if total < 1:
        raise csi.CsiError(f"trace of {len(trace)} frames is shorter than the {cfg.window}-frame window")
    n = total if n_windows is None else min(n_windows, total)
    H, W = cfg.image_hw
    xs, kps, hms, scales = [], [], [], []
    for w in range(n):
        start = w * cfg.stride
        end = start + cfg.window - 1
        pos, phi = None, 0.0
        if cfg.multiscale:
            pos, phi = estimate_scales(dyn, links, scene.radio, end)
        x, weights = window_inputs(seqs, links, start, cfg, pos, phi)
        kp = trace.keypoints[end]
        xs.append(x.x)
        kps.append(kp)
        hms.append(body.gaussian_heatmaps(kp, H, W))
        scales.append(ScaleEstimate(end, pos, phi, weights))
    return Dataset(np.stack(xs), np.stack(kps), np.stack(hms)), scales


def oracle_dataset(preset: str, seed: int, n_samples: int, cfg: FeatureConfig | None = None,
                   n_links: int | None = None):
    """`n_samples` windows from a preset trace just long enough to hold them."""
    cfg = cfg or FeatureConfig()
    radio = csi.RadioConfig.default()
    frames = (n_samples - 1) * cfg.stride + cfg.window
    scene, trace = synth.preset_scenario(preset, seed, duration_s=frames / radio.sample_rate_hz, radio=radio)
    return scenario_dataset(scene, trace, cfg, seed, n_links, n_samples)
