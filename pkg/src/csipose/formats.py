"""On-disk formats: CSB1 binary CSI streams, CSV export, scene and trace JSON, images."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .csi import CsiError, CsiStream, Link, RadioConfig
from .synth import MotionTrace, Scatterer, Scene

_CSB_HEADER = struct.Struct("<4sIIddd")


def atomic_write(path, data: bytes | str):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- CSB1 -------------------------------------------------------------------------

def csb1_bytes(stream: CsiStream) -> bytes:
    """Header {magic, u32 K, u32 A, f64 sample rate, f64 wavelength, f64 spacing},
    then per frame an f64 timestamp and K*A (re, im) f32 pairs, subcarrier-major."""
    r = stream.config
    T, K, A = stream.h.shape
    head = _CSB_HEADER.pack(b"CSB1", K, A, r.sample_rate_hz, r.carrier_wavelength_m, r.subcarrier_spacing_hz)
    iq = np.empty((T, K, A, 2), dtype="<f4")
    iq[..., 0] = stream.h.real
    iq[..., 1] = stream.h.imag
    rec = np.empty(T, dtype=[("t", "<f8"), ("iq", "<f4", (K * A * 2,))])
    rec["t"] = stream.timestamps
    rec["iq"] = iq.reshape(T, -1)
    return head + rec.tobytes()


def write_csb1(path, stream: CsiStream):
    atomic_write(path, csb1_bytes(stream))


def read_csb1(path, link_id: str = "rx1") -> CsiStream:
    data = Path(path).read_bytes()
    if len(data) < _CSB_HEADER.size:
        raise CsiError(f"{path}: truncated CSB1 header")
    magic, K, A, fs, lam, df = _CSB_HEADER.unpack_from(data)
    if magic != b"CSB1":
        raise CsiError(f"{path}: bad magic {magic!r}, expected CSB1")
    frame_size = 8 + 4 * K * A * 2
    body = len(data) - _CSB_HEADER.size
    if body % frame_size:
        raise CsiError(f"{path}: payload of {body} bytes is not a whole number of {frame_size}-byte frames")
    T = body // frame_size
    rec = np.frombuffer(data, dtype=[("t", "<f8"), ("iq", "<f4", (K * A * 2,))], count=T, offset=_CSB_HEADER.size)
    iq = rec["iq"].reshape(T, K, A, 2).astype(float)
    radio = RadioConfig(lam, df, K, A, lam / 2, fs)
    return CsiStream(iq[..., 0] + 1j * iq[..., 1], rec["t"].astype(float), radio, link_id)


def csv_text(stream: CsiStream) -> str:
    """One row per entry: t,k,a,re,im."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "k", "a", "re", "im"])
    T, K, A = stream.h.shape
    for i in range(T):
        t = repr(float(stream.timestamps[i]))
        for k in range(K):
            for a in range(A):
                v = stream.h[i, k, a]
                w.writerow([t, k, a, repr(float(v.real)), repr(float(v.imag))])
    return buf.getvalue()


# --- scene / trace JSON -----------------------------------------------------------

def radio_to_dict(r: RadioConfig) -> dict:
    return asdict(r)


def radio_from_dict(d: dict) -> RadioConfig:
    base = asdict(RadioConfig.default())
    unknown = set(d) - set(base)
    if unknown:
        raise CsiError(f"unknown radio keys: {sorted(unknown)}")
    return RadioConfig.default(**d)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "radio": radio_to_dict(scene.radio),
        "links": [{"id": l.id, "tx": list(l.tx_pos), "rx": list(l.rx_pos)} for l in scene.links],
        "statics": [
            {"pos": list(s.pos), "reflectivity": [s.reflectivity.real, s.reflectivity.imag]}
            for s in scene.statics
        ],
        "seed": scene.seed,
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        links = [Link(l["id"], tuple(l["tx"]), tuple(l["rx"])) for l in d["links"]]
        statics = [Scatterer(tuple(s["pos"]), complex(*s["reflectivity"])) for s in d.get("statics", [])]
    except (KeyError, TypeError) as e:
        raise CsiError(f"malformed scene document: {e}") from None
    return Scene(links, statics, radio_from_dict(d.get("radio", {})), int(d.get("seed", 0)))


def trace_to_dict(tr: MotionTrace) -> dict:
    d = {
        "times": tr.times.tolist(),
        "user_pos": tr.user_pos.tolist(),
        "orientation": tr.orientation.tolist(),
        "joints": tr.joints.tolist(),
        "reflectivity": np.asarray(tr.reflectivity).tolist(),
    }
    if tr.keypoints is not None:
        d["keypoints"] = tr.keypoints.tolist()
    return d


def trace_from_dict(d: dict) -> MotionTrace:
    try:
        return MotionTrace(
            np.array(d["times"]), np.array(d["user_pos"]), np.array(d["orientation"]), np.array(d["joints"]),
            np.array(d["keypoints"]) if "keypoints" in d else None,
            np.array(d["reflectivity"]) if "reflectivity" in d else None,
        )
    except KeyError as e:
        raise CsiError(f"malformed trace document: missing {e}") from None


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=1))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CsiError(f"{path}: invalid JSON: {e}") from None


# --- images ---------------------------------------------------------------------------

def write_image(path, img: np.ndarray):
    """8-bit grayscale PNG, or binary PGM when the suffix is .pgm."""
    a = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        atomic_write(path, f"P5 {a.shape[1]} {a.shape[0]} 255\n".encode() + a.tobytes())
        return
    buf = io.BytesIO()
    Image.fromarray(a, mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    """Float image on the [0, 255] scale; colour is kept as H x W x 3."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("RGB", "RGBA", "P"):
            return np.asarray(im.convert("RGB"), dtype=float)
        return np.asarray(im.convert("L"), dtype=float)
