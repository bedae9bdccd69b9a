"""Client for an instruction-guided image-editing service, and an offline stub.

Wire protocol: POST <endpoint>/edit with a JSON body
{image_b64, instruction, steps, text_guidance, image_guidance}, the image
being a base64 PNG. The reply is {image_b64} holding the generated PNG.
"""

from __future__ import annotations

import base64
import io
import json
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, correlate1d, gaussian_filter

from .csi import CsiError

ENDPOINT_ENV = "CSIPOSE_AIGC_ENDPOINT"
DEFAULT_TEXT_GUIDANCE = 7.5
DEFAULT_IMAGE_GUIDANCE = 1.5
MAX_RETRIES = 2
GRACE_S = 0.5
TRANSIENT_STATUS = (502, 503, 504)

STUB_SIGMA0 = 3000.0
STUB_MAX_SMOOTHING = 4


class AigcError(CsiError):
    pass


class AigcTimeout(AigcError):
    def __init__(self, elapsed_s: float):
        super().__init__(f"generation timed out after {elapsed_s:.2f} s")
        self.elapsed_s = elapsed_s


class ServiceError(AigcError):
    def __init__(self, status: int, body: str):
        super().__init__(f"service returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class ProtocolError(AigcError):
    pass


@dataclass
class GenerationRequest:
    skeleton_image: np.ndarray
    instruction: str = ""
    steps: int = 20
    text_guidance: float = DEFAULT_TEXT_GUIDANCE
    image_guidance: float = DEFAULT_IMAGE_GUIDANCE
    timeout_s: float = 30.0

    def __post_init__(self):
        self.skeleton_image = np.asarray(self.skeleton_image, dtype=float)
        if self.skeleton_image.ndim != 2:
            raise AigcError("skeleton image must be 2-D (monochrome)")
        if int(self.steps) != self.steps or self.steps < 1:
            raise AigcError("steps must be an integer >= 1")
        if not (self.text_guidance > 0 and self.image_guidance > 0):
            raise AigcError("guidance scales must be positive")
        if not self.timeout_s > 0:
            raise AigcError("timeout must be positive")

    def to_json(self) -> dict:
        return {
            "image_b64": base64.b64encode(encode_png(self.skeleton_image)).decode("ascii"),
            "instruction": self.instruction,
            "steps": int(self.steps),
            "text_guidance": float(self.text_guidance),
            "image_guidance": float(self.image_guidance),
        }


@dataclass
class GenerationResult:
    image: np.ndarray
    png: bytes = b""
    retries: int = 0
    elapsed_s: float = 0.0
    meta: dict = field(default_factory=dict)


def encode_png(img: np.ndarray) -> bytes:
    a = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode not in ("L", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im, dtype=float)


def resolve_endpoint(endpoint: str | None = None) -> str:
    url = endpoint or os.environ.get(ENDPOINT_ENV)
    if not url:
        raise AigcError(f"no endpoint given and {ENDPOINT_ENV} is not set")
    return url.rstrip("/")


def _post(url: str, body: bytes, timeout: float):
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def _parse(payload: bytes) -> tuple[np.ndarray, bytes]:
    try:
        d = json.loads(payload)
        png = base64.b64decode(d["image_b64"], validate=True)
        return decode_png(png), png
    except Exception as e:  # any malformed reply is a protocol violation
        raise ProtocolError(f"undecodable reply: {type(e).__name__}: {e}") from None


def generate(req: GenerationRequest, endpoint: str | None = None) -> GenerationResult:
    """Send the request, retrying transient failures at most twice.

    The call returns or raises within timeout_s plus a 0.5 s grace period.
    """
    url = resolve_endpoint(endpoint) + "/edit"
    body = json.dumps(req.to_json()).encode()
    t0 = time.monotonic()
    deadline = t0 + req.timeout_s
    retries = 0
    # one worker per call; an abandoned request cannot block the caller
    pool = ThreadPoolExecutor(max_workers=1)
    try:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise AigcTimeout(time.monotonic() - t0)
            fut = pool.submit(_post, url, body, remaining)
            try:
                status, payload = fut.result(timeout=remaining + GRACE_S / 2)
            except FutureTimeout:
                raise AigcTimeout(time.monotonic() - t0) from None
            except (TimeoutError, urllib.error.URLError, ConnectionError, OSError) as e:
                reason = getattr(e, "reason", e)
                if isinstance(reason, TimeoutError) or "timed out" in str(reason):
                    raise AigcTimeout(time.monotonic() - t0) from None
                if retries < MAX_RETRIES:
                    retries += 1
                    continue
                raise AigcError(f"connection failed after {retries} retries: {reason}") from None
            if 200 <= status < 300:
                img, png = _parse(payload)
                return GenerationResult(img, png, retries, time.monotonic() - t0, {"status": status})
            if status in TRANSIENT_STATUS and retries < MAX_RETRIES:
                retries += 1
                continue
            raise ServiceError(status, payload.decode("utf-8", "replace"))
    finally:
        pool.shutdown(wait=False)


# --- offline stub -----------------------------------------------------------------

def _texture(shape, rng) -> np.ndarray:
    """Zero-mean, unit-range texture with a 1/f amplitude spectrum."""
    H, W = shape
    f = np.sqrt(np.fft.fftfreq(H)[:, None] ** 2 + np.fft.fftfreq(W)[None, :] ** 2)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / f
    spec[0, 0] = 0
    t = np.real(np.fft.ifft2(spec))
    return (t - t.min()) / (t.max() - t.min() + 1e-12) - 0.5


def _smooth(img: np.ndarray, passes: int) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    for _ in range(passes):
        img = correlate1d(correlate1d(img, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    return img


def stub_generate(req: GenerationRequest, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for the editing model.

    Draws a shaded figure over the skeleton (bones dilated, then blurred)
    on a textured background, then adds noise with sigma = 3000 / steps
    after min(steps, 4) binomial smoothing passes over the noise field.
    The image guidance sets figure contrast and the text guidance sets
    texture strength.
    """
    sk = req.skeleton_image
    rng = np.random.default_rng(seed)
    texture = _texture(sk.shape, rng)
    noise = rng.standard_normal(sk.shape)

    figure = gaussian_filter(binary_dilation(sk > 127, iterations=2).astype(float), 1.0)
    a = req.image_guidance / (req.image_guidance + 1.0)
    t = req.text_guidance / (req.text_guidance + 1.0)
    # the figure brightens the texture instead of replacing it, so no region is flat
    base = 80.0 + 120.0 * t * texture + 100.0 * a * figure

    # smoothing acts on the residual noise, leaving the rendered content sharp
    residual = _smooth((STUB_SIGMA0 / req.steps) * noise, min(int(req.steps), STUB_MAX_SMOOTHING))
    return np.clip(base + residual, 0.0, 255.0)
