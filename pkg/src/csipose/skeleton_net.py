"""Encoder-decoder mapping CSI windows to per-joint heatmaps.

Encoder: three blocks of (3x3 conv, stride 2) + (1x1 conv, stride 1), ReLU
after every layer, then a fully connected layer onto an H/4 x W/4 latent
grid. Decoder: two 1x1 layers and five 3x3 layers at stride 1, with
nearest x2 upsampling before decoder layers 3 and 5. A spatial softmax turns
the final linear maps into heatmaps; keypoints come from their soft-argmax.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import formats, nn
from .body import N_JOINTS
from .csi import CsiError

PIXEL_L2_WEIGHT = 0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NetConfig:
    input_shape: tuple[int, int, int] = (16, 30, 4)
    output_hw: tuple[int, int] = (32, 32)
    n_joints: int = N_JOINTS
    enc_widths: tuple[int, int, int] = (8, 16, 16)
    latent_channels: int = 4
    dec_widths: tuple[int, ...] = (16, 16, 16, 16, 8, 8)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.output_hw = tuple(int(v) for v in self.output_hw)
        self.enc_widths = tuple(int(v) for v in self.enc_widths)
        self.dec_widths = tuple(int(v) for v in self.dec_widths)
        if len(self.enc_widths) != 3:
            raise CsiError("encoder needs exactly 3 block widths")
        if len(self.dec_widths) != 6:
            raise CsiError("decoder needs 6 hidden widths (7 layers, last outputs joints)")
        widths = self.enc_widths + self.dec_widths + (self.latent_channels, self.n_joints)
        if min(widths) < 1 or min(self.input_shape) < 1:
            raise CsiError("all widths and input dims must be >= 1")
        H, W = self.output_hw
        if H % 4 or W % 4:
            raise CsiError("output height and width must be divisible by 4")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.output_hw[0] // 4, self.output_hw[1] // 4

    @property
    def encoded_hw(self) -> tuple[int, int]:
        h, w = self.input_shape[:2]
        for _ in range(3):
            h, w = -(-h // 2), -(-w // 2)
        return h, w


class Net:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        T, K, C = cfg.input_shape
        layers: list[nn.Layer] = []
        cin = C
        for i, w in enumerate(cfg.enc_widths):
            layers += [nn.Conv2D(cin, w, 3, 2, f"enc{i}_3x3"), nn.ReLU(),
                       nn.Conv2D(w, w, 1, 1, f"enc{i}_1x1"), nn.ReLU()]
            cin = w
        eh, ew = cfg.encoded_hw
        lh, lw = cfg.latent_hw
        layers += [nn.Dense(eh * ew * cin, lh * lw * cfg.latent_channels, "fc"), nn.ReLU(),
                   nn.Reshape((lh, lw, cfg.latent_channels))]
        cin = cfg.latent_channels
        outs = cfg.dec_widths + (cfg.n_joints,)
        for i, w in enumerate(outs):
            if i in (2, 4):
                layers.append(nn.Upsample2x())
            k = 1 if i < 2 else 3
            layers.append(nn.Conv2D(cin, w, k, 1, f"dec{i}_{k}x{k}"))
            if i < len(outs) - 1:
                layers.append(nn.ReLU())
            cin = w
        layers.append(nn.SpatialSoftmax())
        self.layers = layers

    @property
    def param_layers(self):
        return [l for l in self.layers if l.params]

    def named_params(self) -> dict:
        return {f"{l.name}.{k}": v for l in self.param_layers for k, v in l.params.items()}

    def named_grads(self) -> dict:
        return {f"{l.name}.{k}": v for l in self.param_layers for k, v in l.grads.items()}

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.named_params().values())

    @property
    def dtype(self):
        return self.param_layers[0].params["W"].dtype

    def astype(self, dtype) -> "Net":
        """Convert parameters in place (float32 trains about twice as fast)."""
        for l in self.param_layers:
            for k in l.params:
                l.params[k] = l.params[k].astype(dtype)
        return self

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.cfg.input_shape:
            raise CsiError(f"input shape {x.shape[1:]} does not match {self.cfg.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x[0] if single else x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def relu_masks(self):
        return [l.mask.copy() for l in self.layers if isinstance(l, nn.ReLU)]


def init_net(cfg: NetConfig, seed: int = 0) -> Net:
    """Fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), small uniform biases."""
    net = Net(cfg)
    rng = np.random.default_rng(seed)
    for layer in net.param_layers:
        W = layer.params["W"]
        fan_in = int(np.prod(W.shape[:-1]))
        bound = np.sqrt(6.0 / fan_in)
        W[...] = rng.uniform(-bound, bound, W.shape)
        layer.params["b"][...] = rng.uniform(-0.01, 0.01, layer.params["b"].shape)
    return net


def expected_param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count, layer by layer."""
    total = 0
    cin = cfg.input_shape[2]
    for w in cfg.enc_widths:
        total += (9 * cin * w + w) + (w * w + w)
        cin = w
    eh, ew = cfg.encoded_hw
    lh, lw = cfg.latent_hw
    n_lat = lh * lw * cfg.latent_channels
    total += eh * ew * cin * n_lat + n_lat
    cin = cfg.latent_channels
    for i, w in enumerate(cfg.dec_widths + (cfg.n_joints,)):
        k2 = 1 if i < 2 else 9
        total += k2 * cin * w + w
        cin = w
    return total


# --- loss -----------------------------------------------------------------------

def _coords(H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    return xx, yy


def soft_argmax(heatmaps: np.ndarray) -> np.ndarray:
    """Expected (x, y) under each normalized heatmap; (..., H, W, J) -> (..., J, 2)."""
    H, W = heatmaps.shape[-3:-1]
    xx, yy = _coords(H, W)
    x = np.einsum("...hwj,hw->...j", heatmaps, xx)
    y = np.einsum("...hwj,hw->...j", heatmaps, yy)
    return np.stack([x, y], axis=-1)


def loss(pred, gt_keypoints, gt_heatmaps, with_grad: bool = False):
    """Mean joint distance (px) of soft-argmax keypoints plus 0.1 x pixel L2.

    Works on single samples (H, W, J) or batches (N, H, W, J); batch values
    are averaged over samples. Returns (loss, mean joint error[, dL/dpred]).
    """
    pred = np.asarray(pred)
    if pred.dtype.kind != "f":
        pred = pred.astype(float)
    single = pred.ndim == 3
    P = pred[None] if single else pred
    kp = np.asarray(gt_keypoints, dtype=float).reshape((P.shape[0], -1, 2))
    G = np.asarray(gt_heatmaps, dtype=P.dtype).reshape(P.shape)
    N, H, W, J = P.shape
    est = soft_argmax(P)
    d = est - kp
    e = np.sqrt(np.sum(d * d, axis=-1))
    joint_err = float(e.mean())
    l2 = np.sum((P - G) ** 2, axis=(1, 2)).mean(axis=-1)  # per sample
    value = joint_err + PIXEL_L2_WEIGHT * float(l2.mean())
    if not with_grad:
        return value, joint_err
    xx, yy = _coords(H, W)
    u = d / np.maximum(e, 1e-12)[..., None]  # N, J, 2
    g = (u[:, None, None, :, 0] * xx[None, :, :, None] + u[:, None, None, :, 1] * yy[None, :, :, None]) / (N * J)
    g = (g + PIXEL_L2_WEIGHT * 2 * (P - G) / (N * J)).astype(P.dtype, copy=False)
    return value, joint_err, (g[0] if single else g)


# --- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 64
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    dtype: str = "float32"
    # with a validation set: end on the parameters of the epoch with the lowest validation joint error
    restore_best: bool = False

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise CsiError(f"unsupported training dtype {self.dtype!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise CsiError("epochs and batch size must be >= 1 and learning rate >= 0")


@dataclass
class Dataset:
    x: np.ndarray  # N x T x K x C
    keypoints: np.ndarray  # N x J x 2
    heatmaps: np.ndarray  # N x H x W x J

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return Dataset(self.x[idx], self.keypoints[idx], self.heatmaps[idx])


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_joint_err: list = field(default_factory=list)
    val_joint_err: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    best_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "train_joint_err", "val_joint_err"])
        for i, tl in enumerate(self.train_loss):
            vl = self.val_loss[i] if i < len(self.val_loss) else ""
            vj = self.val_joint_err[i] if i < len(self.val_joint_err) else ""
            w.writerow([i + 1, tl, vl, self.train_joint_err[i], vj])
        return buf.getvalue()


def evaluate(net: Net, data: Dataset, batch_size: int = 64):
    total, jerr = 0.0, 0.0
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        v, j = loss(net.forward(b.x), b.keypoints, b.heatmaps)
        total += v * len(b)
        jerr += j * len(b)
    return total / len(data), jerr / len(data)


def predict_keypoints(net: Net, x, batch_size: int = 64) -> np.ndarray:
    x = np.asarray(x)
    out = [soft_argmax(net.forward(x[s:s + batch_size])) for s in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _first_nan_layer(net: Net) -> str:
    for l in net.param_layers:
        for k, g in l.grads.items():
            if not np.all(np.isfinite(g)):
                return f"{l.name}.{k}"
    return "output"


def train(net: Net, data: Dataset, cfg: TrainConfig, val: Dataset | None = None, log=None):
    """Adam on the joint loss; returns (net, TrainHistory). The net is updated in place."""
    if len(data) < 1:
        raise CsiError("empty dataset")
    net.astype(cfg.dtype)
    data = Dataset(data.x.astype(cfg.dtype), data.keypoints, data.heatmaps.astype(cfg.dtype))
    rng = np.random.default_rng(cfg.seed)
    opt = nn.Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    hist = TrainHistory()
    hist.initial_loss = evaluate(net, data)[0]
    params = net.named_params()
    best = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        tot, jt = 0.0, 0.0
        for bi, s in enumerate(range(0, len(data), cfg.batch_size)):
            b = data.subset(order[s:s + cfg.batch_size])
            out = net.forward(b.x)
            value, jerr, g = loss(out, b.keypoints, b.heatmaps, with_grad=True)
            net.backward(g)
            if not np.isfinite(value) or not all(np.all(np.isfinite(v)) for v in net.named_grads().values()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}, first NaN in {_first_nan_layer(net)}"
                )
            opt.step(params, net.named_grads())
            tot += value * len(b)
            jt += jerr * len(b)
        hist.train_loss.append(tot / len(data))
        hist.train_joint_err.append(jt / len(data))
        if val is not None and len(val):
            vl, vj = evaluate(net, val)
            hist.val_loss.append(vl)
            hist.val_joint_err.append(vj)
            if cfg.restore_best and (best is None or vj < min(hist.val_joint_err[:-1])):
                best = {k: v.copy() for k, v in params.items()}
                hist.best_epoch = epoch + 1
        if log:
            log(epoch + 1, hist)
    if best is not None:
        for k, v in best.items():
            params[k][...] = v
    hist.final_loss = evaluate(net, data)[0]
    return net, hist


# --- gradient verification ------------------------------------------------------

def _loss_and_grads(net, x, kp, hm):
    out = net.forward(x)
    value, _, g = loss(out, kp, hm, with_grad=True)
    net.backward(g)
    return value, {k: v.copy() for k, v in net.named_grads().items()}


def gradient_check(net, sample, eps: float = 1e-4, n_params: int = 200, seed: int = 0, max_tries: int = 10_000):
    """Max relative error between backprop and central differences.

    Parameters whose +/- eps perturbation flips any ReLU are skipped and
    another is drawn. Returns (max_rel_err, n_checked, n_resampled).
    """
    x, kp, hm = sample
    if isinstance(net, Net):
        net.astype(np.float64)
    x = np.asarray(x, dtype=float)
    if x.ndim == 3:
        x, kp, hm = x[None], np.asarray(kp)[None], np.asarray(hm)[None]
    _, grads = _loss_and_grads(net, x, kp, hm)
    base_masks = net.relu_masks() if hasattr(net, "relu_masks") else []
    params = net.named_params()
    keys = list(params)
    sizes = np.array([params[k].size for k in keys], dtype=float)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    seen = set()
    for _ in range(max_tries):
        if checked >= n_params:
            break
        k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
        i = int(rng.integers(params[k].size))
        if (k, i) in seen:
            continue
        seen.add((k, i))
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        lp = loss(net.forward(x), kp, hm)[0]
        m_plus = net.relu_masks() if base_masks else []
        flat[i] = old - eps
        lm = loss(net.forward(x), kp, hm)[0]
        m_minus = net.relu_masks() if base_masks else []
        flat[i] = old
        if any(not np.array_equal(a, b) or not np.array_equal(a, c) for a, b, c in zip(base_masks, m_plus, m_minus)):
            skipped += 1
            continue
        num = (lp - lm) / (2 * eps)
        ana = grads[k].reshape(-1)[i]
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return worst, checked, skipped


class LinearProbe:
    """Single dense layer from input to heatmap logits with a squared-error loss.

    Used to validate the finite-difference harness on a model whose loss is
    exactly quadratic in its parameters.
    """

    def __init__(self, input_shape, out_shape, seed=0):
        rng = np.random.default_rng(seed)
        self.layer = nn.Dense(int(np.prod(input_shape)), int(np.prod(out_shape)), "probe")
        self.layer.params["W"][...] = rng.normal(0, 0.1, self.layer.params["W"].shape)
        self.layer.params["b"][...] = rng.normal(0, 0.1, self.layer.params["b"].shape)
        self.out_shape = tuple(out_shape)

    def named_params(self):
        return {f"probe.{k}": v for k, v in self.layer.params.items()}

    def named_grads(self):
        return {f"probe.{k}": v for k, v in self.layer.grads.items()}

    def forward(self, x):
        return self.layer.forward(x).reshape((x.shape[0],) + self.out_shape)

    def backward(self, dout):
        return self.layer.backward(dout.reshape(dout.shape[0], -1))


def linear_probe_check(probe: LinearProbe, x, target, eps=1e-4, n_params=200, seed=0):
    """gradient_check counterpart for the probe's loss sum((y - target)^2) / 2."""
    x = np.asarray(x, dtype=float)[None]
    target = np.asarray(target, dtype=float)[None]

    def f():
        y = probe.forward(x)
        return 0.5 * np.sum((y - target) ** 2), y - target

    _, g = f()
    probe.backward(g)
    grads = {k: v.copy() for k, v in probe.named_grads().items()}
    params = probe.named_params()
    keys = list(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        k = keys[rng.integers(len(keys))]
        flat = params[k].reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        lp = f()[0]
        flat[i] = old - eps
        lm = f()[0]
        flat[i] = old
        num = (lp - lm) / (2 * eps)
        ana = grads[k].reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


# --- checkpoints ----------------------------------------------------------------

_CKPT_MAGIC = b"SKN1"


def save_checkpoint(net: Net, path):
    """Binary checkpoint: magic, u32 config length, config JSON, u32 tensor count,
    then per tensor {u16 name length, name, u8 ndim, u32 dims..., f32 payload}."""
    cfg = json.dumps(asdict(net.cfg)).encode()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = net.named_params()
    buf.write(struct.pack("<I", len(params)))
    for name, v in params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", v.ndim))
        buf.write(struct.pack(f"<{v.ndim}I", *v.shape))
        buf.write(v.astype("<f4").tobytes())
    formats.atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> Net:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise CsiError(f"{path}: not a skeleton-net checkpoint")
    off = 4
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg = NetConfig(**json.loads(data[off:off + n]))
    off += n
    net = Net(cfg)
    params = net.named_params()
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + ln].decode()
        off += ln
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        size = int(np.prod(shape))
        arr = np.frombuffer(data, "<f4", size, off).reshape(shape)
        off += 4 * size
        if name not in params or params[name].shape != tuple(shape):
            raise CsiError(f"checkpoint tensor {name} {shape} does not fit the config")
        params[name][...] = arr
    return net
