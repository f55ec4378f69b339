"""Differentiable operators.

Every operator is a small object: ``forward(*inputs)`` caches what the
backward pass needs and returns the output, ``backward(grad_out)`` returns one
gradient per input (``None`` for non-differentiable inputs such as integer
targets). A fresh instance is used per call site; callers run the backward
passes in reverse order themselves.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Conv2d:
    """2-D cross-correlation on NCHW input, weight ``(O, C, kh, kw)``.

    im2col is built channels-last so both the patch gather and its adjoint
    are ``kh * kw`` contiguous slice copies. ``input_grad=False`` skips the
    input gradient (first layer on raw images).
    """

    def __init__(self, stride=1, padding=0, input_grad=True):
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.input_grad = input_grad

    @staticmethod
    def output_size(size, k, s, p):
        return (size + 2 * p - k) // s + 1

    def forward(self, x, w, b):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects NCHW input and OCkk weight, got {x.shape}, {w.shape}")
        n, c, h, wd = x.shape
        o, cw, kh, kw = w.shape
        if c != cw:
            raise ShapeError(f"input has {c} channels, weight expects {cw}")
        if b is not None and b.shape != (o,):
            raise ShapeError(f"bias shape {b.shape} != ({o},)")
        sh, sw = self.stride
        ph, pw = self.padding
        if h + 2 * ph < kh or wd + 2 * pw < kw:
            raise ShapeError("kernel larger than padded input")
        ho = self.output_size(h, kh, sh, ph)
        wo = self.output_size(wd, kw, sw, pw)
        xn = np.zeros((n, h + 2 * ph, wd + 2 * pw, c), dtype=x.dtype)
        xn[:, ph:ph + h, pw:pw + wd] = x.transpose(0, 2, 3, 1)
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xn[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
        wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
        y = cols @ wmat.T
        if b is not None:
            y += b
        self.cache = (x.shape, xn.shape, cols, w.shape, wmat, b is not None, ho, wo)
        return np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, gy):
        xshape, xnshape, cols, wshape, wmat, has_b, ho, wo = self.cache
        n, c, h, wd = xshape
        o, _, kh, kw = wshape
        sh, sw = self.stride
        ph, pw = self.padding
        g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, o)
        # (cols^T g)^T keeps the long axis contiguous for BLAS
        gw = np.ascontiguousarray((cols.T @ g).T.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        gb = g.sum(axis=0) if has_b else None
        if not self.input_grad:
            return None, gw, gb
        gcols = (g @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxn = np.zeros(xnshape, dtype=gy.dtype)
        for i in range(kh):
            for j in range(kw):
                gxn[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcols[:, :, :, i, j]
        gx = gxn[:, ph:ph + h, pw:pw + wd].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gw, gb


class Linear:
    """``x @ w + b`` over the last axis; ``w`` has shape ``(in, out)``."""

    def forward(self, x, w, b):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
        self.cache = (x, w, b is not None)
        y = x @ w
        if b is not None:
            y = y + b
        return y

    def backward(self, gy):
        x, w, has_b = self.cache
        x2 = x.reshape(-1, x.shape[-1])
        g2 = gy.reshape(-1, gy.shape[-1])
        return gy @ w.T, x2.T @ g2, (g2.sum(axis=0) if has_b else None)


class ReLU:
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, gy):
        return (gy * self.mask,)


class Sigmoid:
    def forward(self, x):
        self.y = sigmoid(x)
        return self.y

    def backward(self, gy):
        return (gy * self.y * (1.0 - self.y),)


class Softmax:
    def __init__(self, axis=-1):
        self.axis = axis

    def forward(self, x):
        self.y = softmax(x, self.axis)
        return self.y

    def backward(self, gy):
        y = self.y
        return (y * (gy - np.sum(gy * y, axis=self.axis, keepdims=True)),)


class AvgOverHeight:
    """NCHW -> NCW by averaging rows."""

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected NCHW input, got {x.shape}")
        self.h = x.shape[2]
        return x.mean(axis=2)

    def backward(self, gy):
        g = np.repeat(gy[:, :, None, :] / self.h, self.h, axis=2)
        return (g,)


class InstanceNorm:
    """Per-sample, per-channel standardisation over the spatial axes (no parameters)."""

    def __init__(self, eps=1e-3):
        self.eps = eps

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (n, c, h, w), got {x.shape}")
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + self.eps)
        y = xc * inv
        self.cache = (y, inv)
        return y

    def backward(self, gy):
        y, inv = self.cache
        gm = gy.mean(axis=(2, 3), keepdims=True)
        gym = (gy * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (gy - gm - y * gym),)


class UpsampleNearest:
    def __init__(self, factor=2):
        self.f = int(factor)

    def forward(self, x):
        f = self.f
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, gy):
        n, c, h, w = gy.shape
        f = self.f
        return (gy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


class SelfAttention:
    """Single-head scaled dot-product self-attention with a residual.

    Input and output are sequence-major ``(w, n, c)``; projections are
    ``(c, c)`` matrices applied on the right.
    """

    def forward(self, x, wq, wk, wv):
        if x.ndim != 3:
            raise ShapeError(f"expected (w, n, c) sequence, got {x.shape}")
        c = x.shape[2]
        for m in (wq, wk, wv):
            if m.shape != (c, c):
                raise ShapeError(f"projection shape {m.shape} != ({c}, {c})")
        X = x.transpose(1, 0, 2)
        Q, K, V = X @ wq, X @ wk, X @ wv
        scale = 1.0 / math.sqrt(c)
        A = softmax((Q @ K.transpose(0, 2, 1)) * scale, axis=-1)
        out = A @ V + X
        self.cache = (X, Q, K, V, A, wq, wk, wv, scale)
        return out.transpose(1, 0, 2)

    def backward(self, gy):
        X, Q, K, V, A, wq, wk, wv, scale = self.cache
        gO = gy.transpose(1, 0, 2)
        gA = gO @ V.transpose(0, 2, 1)
        gV = A.transpose(0, 2, 1) @ gO
        gS = A * (gA - np.sum(gA * A, axis=-1, keepdims=True)) * scale
        gQ = gS @ K
        gK = gS.transpose(0, 2, 1) @ Q
        c = X.shape[2]
        Xf = X.reshape(-1, c)
        gwq = Xf.T @ gQ.reshape(-1, c)
        gwk = Xf.T @ gK.reshape(-1, c)
        gwv = Xf.T @ gV.reshape(-1, c)
        gX = gO + gQ @ wq.T + gK @ wk.T + gV @ wv.T
        return gX.transpose(1, 0, 2), gwq, gwk, gwv


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


# functional shorthands for forward-only use
def conv2d(x, w, b, stride=1, padding=0):
    return Conv2d(stride, padding).forward(x, w, b)


def linear(x, w, b):
    return Linear().forward(x, w, b)


def relu(x):
    return np.maximum(x, 0)


def avg_over_height(x):
    return AvgOverHeight().forward(x)


def self_attention(x, wq, wk, wv):
    return SelfAttention().forward(x, wq, wk, wv)
