"""Registered finite-difference checks behind ``artspot grad-check``.

Each case builds float64 inputs kept away from kinks (ReLU zero, bilinear cell
boundaries, smooth-L1 elbow) by at least ``10 * eps``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import arm as arm_mod
from .arm import ArmExtract, TpsGrid, build_tps_basis
from .nn import losses, ops
from .nn.gradcheck import grad_check

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= TOLERANCE


def _away_from_zero(rng, shape, margin):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _grid_points(rng, shape, lo, hi, margin):
    """Coordinates with fractional part inside ``[margin, 1 - margin]``."""
    base = rng.integers(lo, hi, size=shape).astype(np.float64)
    return base + rng.uniform(margin, 1.0 - margin, size=shape)


class _Bound:
    """Adapter fixing some inputs so grad_check only sees the probed ones."""

    def __init__(self, op, fixed: dict, n_inputs: int):
        self.op = op
        self.fixed = fixed
        self.n = n_inputs

    def _full(self, args):
        it = iter(args)
        return [self.fixed[i] if i in self.fixed else next(it) for i in range(self.n)]

    def forward(self, *args):
        return self.op.forward(*self._full(args))

    def backward(self, g):
        grads = self.op.backward(g)
        return tuple(gr for i, gr in enumerate(grads) if i not in self.fixed)


class _Chain:
    """Control points -> TPS grid -> bilinear sample -> recognizer -> CE loss.

    The recognizer is a conv + ReLU + height-average + attention + linear
    stack with fixed float64 weights. Only the control points are probed.
    """

    def __init__(self, seed=0, n_rcp=4, out_size=(4, 8), channels=3, n_classes=5):
        rng = np.random.default_rng(seed)
        self.basis = build_tps_basis(n_rcp, out_size)
        self.features = rng.standard_normal((channels, 12, 24))
        r = 4
        self.conv_w = rng.standard_normal((r, channels, 3, 3)) * 0.3
        self.conv_b = rng.standard_normal(r) * 0.1
        self.wq, self.wk, self.wv = (rng.standard_normal((r, r)) * 0.5 for _ in range(3))
        self.fc_w = rng.standard_normal((r, n_classes))
        self.fc_b = np.zeros(n_classes)
        self.labels = rng.integers(0, n_classes, size=(1, out_size[1]))

    def points(self, rng):
        n = self.basis.n_rcp
        xs = np.linspace(4.0, 18.0, n)
        top = np.stack([xs, np.full(n, 3.0)], axis=1)
        bot = np.stack([xs, np.full(n, 8.0)], axis=1)
        return (np.concatenate([top, bot]) + rng.uniform(-0.8, 0.8, (2 * n, 2)))[None]

    def forward(self, points):
        self.grid = TpsGrid(self.basis)
        g = self.grid.forward(points)
        self.samp = ops_bilinear()
        crops = self.samp.forward(self.features, g).transpose(1, 0, 2, 3)
        self.norm = ops.InstanceNorm()
        crops = self.norm.forward(crops)
        self.conv, self.relu, self.avg = ops.Conv2d(1, 1), ops.ReLU(), ops.AvgOverHeight()
        self.pre_relu = self.conv.forward(crops, self.conv_w, self.conv_b)
        x = self.relu.forward(self.pre_relu)
        seq = self.avg.forward(x).transpose(2, 0, 1)
        self.attn, self.fc = ops.SelfAttention(), ops.Linear()
        y = self.fc.forward(self.attn.forward(seq, self.wq, self.wk, self.wv), self.fc_w, self.fc_b)
        self.ce = losses.CrossEntropy()
        self.gridv = g
        return self.ce.forward(y.transpose(1, 0, 2), self.labels)

    def backward(self, g):
        (gy, _) = self.ce.backward(float(g))
        gs, _, _ = self.fc.backward(gy.transpose(1, 0, 2))
        gs, _, _, _ = self.attn.backward(gs)
        (gx,) = self.avg.backward(gs.transpose(1, 2, 0))
        (gx,) = self.relu.backward(gx)
        gc, _, _ = self.conv.backward(gx)
        (gc,) = self.norm.backward(gc)
        _, ggrid = self.samp.backward(gc.transpose(1, 0, 2, 3))
        return self.grid.backward(ggrid)

    def stable(self, points, eps):
        """True when no floor cell, bounds mask or ReLU sign flips within +-eps."""
        ref = self._pattern(points)
        flat = points.reshape(-1)
        for j in range(flat.size):
            for d in (eps, -eps):
                old = flat[j]
                flat[j] = old + d
                pat = self._pattern(points)
                flat[j] = old
                if any((a != b).any() for a, b in zip(ref, pat)):
                    return False
        return True

    def _pattern(self, points):
        self.forward(points)
        gx = self.gridv[..., 0]
        gy = self.gridv[..., 1]
        c, h, w = self.features.shape
        inb = (gx >= 0) & (gx < w - 1) & (gy >= 0) & (gy < h - 1)
        return np.floor(gx), np.floor(gy), inb, self.pre_relu > 0


def _floor_stable(fn, x, eps):
    """``fn(x)`` (an integer-valued pattern) is unchanged under +-eps per coordinate."""
    ref = fn(x)
    flat = x.reshape(-1)
    for j in range(flat.size):
        for d in (eps, -eps):
            old = flat[j]
            flat[j] = old + d
            same = np.array_equal(fn(x), ref)
            flat[j] = old
            if not same:
                return False
    return True


def ops_bilinear():
    # looked up at call time so a patched sampler is what gets checked
    return arm_mod.BilinearSample()


def _cases(eps, seed):
    rng = np.random.default_rng(seed)
    m = 10 * eps
    c = []
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    c.append(("conv2d", ops.Conv2d(1, 1), [x, w, b]))
    c.append(("conv2d_stride21", ops.Conv2d((2, 1), 1), [x.copy(), w.copy(), b.copy()]))
    c.append(("linear", ops.Linear(), [rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 6)),
                                       rng.standard_normal(6)]))
    c.append(("relu", ops.ReLU(), [_away_from_zero(rng, (4, 7), m)]))
    c.append(("sigmoid", ops.Sigmoid(), [rng.standard_normal((4, 7))]))
    c.append(("softmax", ops.Softmax(-1), [rng.standard_normal((4, 7))]))
    c.append(("avg_over_height", ops.AvgOverHeight(), [rng.standard_normal((2, 3, 4, 5))]))
    c.append(("instance_norm", ops.InstanceNorm(), [rng.standard_normal((2, 3, 4, 5))]))
    c.append(("upsample_nearest", ops.UpsampleNearest(2), [rng.standard_normal((2, 3, 3, 4))]))
    c.append(("self_attention", ops.SelfAttention(),
              [rng.standard_normal((5, 2, 4))] + [rng.standard_normal((4, 4)) * 0.5 for _ in range(3)]))

    d = rng.standard_normal((6, 8)) * 2.0
    d = np.where(np.abs(np.abs(d) - 1.0) < m, d + 3 * m * np.sign(d), d)
    tgt = rng.standard_normal((6, 8))
    c.append(("smooth_l1", _Bound(losses.SmoothL1(1.0), {1: tgt}, 2), [tgt + d]))
    y = (rng.random((5, 6)) < 0.3).astype(np.float64)
    mask = (rng.random((5, 6)) < 0.8).astype(np.float64)
    c.append(("focal_loss", _Bound(losses.FocalLoss(), {1: y, 2: mask}, 3), [rng.standard_normal((5, 6))]))
    c.append(("bce_with_logits", _Bound(losses.BCEWithLogits(), {1: rng.random((5, 6)), 2: mask}, 3),
              [rng.standard_normal((5, 6))]))
    lab = rng.integers(0, 5, size=(3, 4))
    c.append(("cross_entropy", _Bound(losses.CrossEntropy(pad_index=4), {1: lab}, 2),
              [rng.standard_normal((3, 4, 5))]))

    basis = build_tps_basis(4, (4, 8))
    c.append(("tps_grid", _Bound(TpsGrid(basis), {}, 1), [rng.standard_normal((2, 8, 2)) * 5]))
    feats = rng.standard_normal((3, 6, 7))
    grid = np.stack([_grid_points(rng, (4, 5), -1, 7, m), _grid_points(rng, (4, 5), -1, 6, m)], axis=-1)
    c.append(("bilinear_sample.features", _Bound(ops_bilinear(), {1: grid}, 2), [feats]))
    c.append(("bilinear_sample.grid", _Bound(ops_bilinear(), {0: feats}, 2), [grid.copy()]))

    # ARM with both paths: feature maps at two strides and image-pixel points
    arm_basis = build_tps_basis(4, (4, 8))
    lv = [rng.standard_normal((2, 10, 12)), rng.standard_normal((2, 5, 6))]
    def cells(p):
        g = TpsGrid(arm_basis).forward(arm_mod.image_to_level(p, 4))
        return np.floor(g)

    while True:
        pts = np.concatenate([
            np.stack([np.linspace(6, 38, 4), np.full(4, 8.0)], 1),
            np.stack([np.linspace(6, 38, 4), np.full(4, 22.0)], 1),
        ]) + rng.uniform(-1.5, 1.5, (8, 2))
        if _floor_stable(cells, pts, m):
            break

    class _ArmOp:
        def forward(self, l0, points):
            self.op = ArmExtract(arm_basis, [4, 8], force_level=0)
            return self.op.forward([l0, lv[1]], points[None])

        def backward(self, g):
            gl, gp = self.op.backward(g)
            return gl[0], gp[0]

    c.append(("arm_extract", _ArmOp(), [lv[0], pts]))
    return c


def _chain_case(eps, seed):
    for k in range(200):
        chain = _Chain(seed=seed + k)
        rng = np.random.default_rng(seed + k)
        pts = chain.points(rng)
        if chain.stable(pts, eps):
            return chain, pts
    raise RuntimeError("could not find a kink-free point set for the composed check")


def run_grad_checks(eps: float = 1e-3, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, op, inputs in _cases(eps, seed):
        t = time.perf_counter()
        err = grad_check(op, inputs, eps=eps, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t))
    t = time.perf_counter()
    chain, pts = _chain_case(eps, seed)
    err = grad_check(chain, [pts], eps=eps, seed=seed)
    results.append(CheckResult("points_to_recognition_loss", err, time.perf_counter() - t))
    return results
