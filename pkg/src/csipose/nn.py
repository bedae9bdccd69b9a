"""Minimal NHWC layers with explicit backward passes (float64 numpy)."""

from __future__ import annotations

import numpy as np


class Layer:
    name = "layer"
    params: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    """k x k convolution, zero 'same' padding, output size ceil(in / stride)."""

    def __init__(self, cin, cout, k, stride=1, name="conv"):
        super().__init__()
        self.cin, self.cout, self.k, self.stride, self.name = cin, cout, k, stride, name
        self.params = {"W": np.zeros((k, k, cin, cout)), "b": np.zeros(cout)}

    def _pads(self, size):
        out = -(-size // self.stride)
        total = max((out - 1) * self.stride + self.k - size, 0)
        return out, total // 2, total - total // 2

    def _view(self, xp, i, j, Ho, Wo):
        s = self.stride
        return xp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :]

    def forward(self, x):
        N, H, W, C = x.shape
        Ho, pt, pb = self._pads(H)
        Wo, pl, pr = self._pads(W)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
        Wt = self.params["W"]
        # sum of k*k shifted matmuls instead of an explicit im2col buffer
        out = np.empty((N, Ho, Wo, self.cout), dtype=np.result_type(x, Wt))
        out[...] = self.params["b"]
        for i in range(self.k):
            for j in range(self.k):
                out += self._view(xp, i, j, Ho, Wo) @ Wt[i, j]
        self._cache = (x.shape, xp, (pt, pl))
        return out

    def backward(self, dout):
        xshape, xp, (pt, pl) = self._cache
        N, Ho, Wo, _ = dout.shape
        Wt = self.params["W"]
        d2 = dout.reshape(-1, self.cout)
        gW = np.empty_like(Wt)
        dxp = np.zeros(xp.shape, dtype=dout.dtype)
        for i in range(self.k):
            for j in range(self.k):
                v = self._view(xp, i, j, Ho, Wo)
                gW[i, j] = v.reshape(-1, self.cin).T @ d2
                self._view(dxp, i, j, Ho, Wo)[...] += dout @ Wt[i, j].T
        self.grads["W"] = gW
        self.grads["b"] = d2.sum(axis=0)
        H, W = xshape[1], xshape[2]
        return dxp[:, pt:pt + H, pl:pl + W, :]


class Dense(Layer):
    def __init__(self, nin, nout, name="fc"):
        super().__init__()
        self.nin, self.nout, self.name = nin, nout, name
        self.params = {"W": np.zeros((nin, nout)), "b": np.zeros(nout)}

    def forward(self, x):
        self._shape = x.shape
        x2 = x.reshape(x.shape[0], -1)
        self._x = x2
        return x2 @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self.grads["W"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return (dout @ self.params["W"].T).reshape(self._shape)


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, dout):
        return dout * self.mask


class Reshape(Layer):
    name = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dout):
        return dout.reshape(self._in)


class Upsample2x(Layer):
    """Nearest-neighbour x2 upsampling."""

    name = "upsample"

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dout):
        N, H, W, C = dout.shape
        return dout.reshape(N, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


class SpatialSoftmax(Layer):
    """Softmax over H x W independently for each sample and channel."""

    name = "softmax"

    def forward(self, x):
        z = x - x.max(axis=(1, 2), keepdims=True)
        e = np.exp(z)
        self.p = e / e.sum(axis=(1, 2), keepdims=True)
        return self.p

    def backward(self, dout):
        p = self.p
        return p * (dout - np.sum(dout * p, axis=(1, 2), keepdims=True))


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for key, p in params.items():
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
