"""Auto-rectification: thin-plate-spline sampling grids and bilinear sampling.

The destination control sites are fixed on the top and bottom rows of the
output crop, so the TPS map from predicted control points to sampling
coordinates is a fixed linear operator (``TpsBasis.matrix``). Both the grid
generation and the sampler have analytic backward passes, which is what lets
a recognition loss reach the predicted control points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError, SingularSystemError

ARM_STRIDES = (4, 8, 16)


def tps_kernel(r2):
    """``U(r) = r^2 log r^2`` written in terms of ``r^2``; ``U(0) = 0``."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def destination_sites(n_rcp: int, out_size) -> np.ndarray:
    h, w = out_size
    xs = np.arange(n_rcp, dtype=np.float64) / (n_rcp - 1) * (w - 1)
    top = np.stack([xs, np.zeros(n_rcp)], axis=1)
    bottom = np.stack([xs, np.full(n_rcp, h - 1.0)], axis=1)
    return np.concatenate([top, bottom], axis=0)


@dataclass(frozen=True)
class TpsBasis:
    n_rcp: int
    out_size: tuple
    matrix: np.ndarray  # (H_out * W_out, 2 * n_rcp)

    @property
    def sites(self) -> np.ndarray:
        return destination_sites(self.n_rcp, self.out_size)

    def astype(self, dtype) -> "TpsBasis":
        return TpsBasis(self.n_rcp, self.out_size, self.matrix.astype(dtype))


def build_tps_basis(n_rcp: int, out_size) -> TpsBasis:
    h, w = int(out_size[0]), int(out_size[1])
    if n_rcp < 3:
        raise DomainError(f"TPS needs n_rcp >= 3 per side, got {n_rcp}")
    if h < 2:
        raise SingularSystemError("destination sites are collinear (H_out < 2)")
    if w < 2:
        raise DomainError("W_out must be >= 2")
    # solve in coordinates scaled to the unit box: the interpolant is unchanged
    # (the log-scale term is absorbed by the affine part) but conditioning is not
    scale = float(max(h, w) - 1)
    d = destination_sites(n_rcp, (h, w)) / scale
    m = len(d)
    K = tps_kernel(((d[:, None, :] - d[None, :, :]) ** 2).sum(-1))
    P = np.hstack([np.ones((m, 1)), d])
    L = np.zeros((m + 3, m + 3))
    L[:m, :m] = K
    L[:m, m:] = P
    L[m:, :m] = P.T
    rhs = np.zeros((m + 3, m))
    rhs[:m] = np.eye(m)
    if np.linalg.cond(L) > 1e12:
        raise SingularSystemError("TPS system is singular")
    coef = np.linalg.solve(L, rhs)  # LU with partial pivoting

    ys, xs = np.mgrid[0:h, 0:w]
    q = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64) / scale
    phi = np.hstack([
        tps_kernel(((q[:, None, :] - d[None, :, :]) ** 2).sum(-1)),
        np.ones((len(q), 1)),
        q,
    ])
    return TpsBasis(n_rcp, (h, w), phi @ coef)


class TpsGrid:
    """Control points ``(..., 2 n_rcp, 2)`` -> sampling grid ``(..., H, W, 2)``."""

    def __init__(self, basis: TpsBasis):
        self.basis = basis

    def forward(self, points):
        b = self.basis
        if points.shape[-2:] != (2 * b.n_rcp, 2):
            raise ShapeError(f"expected {2 * b.n_rcp} control points, got {points.shape[-2]}")
        M = b.matrix.astype(points.dtype, copy=False)
        grid = np.einsum("pk,...kd->...pd", M, points)
        return grid.reshape(points.shape[:-2] + tuple(b.out_size) + (2,))

    def backward(self, ggrid):
        b = self.basis
        M = b.matrix.astype(ggrid.dtype, copy=False)
        g = ggrid.reshape(ggrid.shape[:-3] + (-1, 2))
        return (np.einsum("pk,...pd->...kd", M, g),)


def gen_grid(basis: TpsBasis, points) -> np.ndarray:
    """Sampling grid ``(H_out, W_out, 2)`` for one instance's control points."""
    if hasattr(points, "as_array"):
        points = points.as_array()
    return TpsGrid(basis).forward(np.asarray(points, dtype=np.float64))


class BilinearSample:
    """Bilinear interpolation of ``features (C, H, W)`` at ``grid (..., 2)``.

    Grid coordinates are ``(x, y)`` in feature pixels; neighbours outside the
    map read as zero.
    """

    def forward(self, features, grid):
        if features.ndim != 3 or grid.shape[-1] != 2:
            raise ShapeError(f"bad sampler shapes {features.shape}, {grid.shape}")
        c, h, w = features.shape
        pts = grid.reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        x0f, y0f = np.floor(x), np.floor(y)
        wx, wy = x - x0f, y - y0f
        x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
        flat = features.reshape(c, h * w)
        corners = []
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                idx = np.where(ok, yi * w + xi, 0)
                val = flat[:, idx] * ok
                corners.append((idx, ok, val))
        (i00, k00, f00), (i01, k01, f01), (i10, k10, f10), (i11, k11, f11) = corners
        top = f00 + wx * (f01 - f00)
        bot = f10 + wx * (f11 - f10)
        out = top + wy * (bot - top)
        self.cache = (features.shape, grid.shape, wx, wy, corners, top, bot)
        return out.reshape((c,) + grid.shape[:-1])

    def backward(self, gout):
        fshape, gshape, wx, wy, corners, top, bot = self.cache
        c, h, w = fshape
        g = gout.reshape(c, -1)
        (i00, k00, f00), (i01, k01, f01), (i10, k10, f10), (i11, k11, f11) = corners
        weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
        idx_all, val_all = [], []
        offs = (np.arange(c) * (h * w))[:, None]
        for (idx, ok, _), wt in zip(corners, weights):
            idx_all.append((offs + idx[None, :]).ravel())
            val_all.append((g * (wt * ok)[None, :]).ravel())
        gfeat = np.bincount(np.concatenate(idx_all), weights=np.concatenate(val_all),
                            minlength=c * h * w).astype(gout.dtype, copy=False).reshape(fshape)
        dx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
        dy = bot - top
        ggrid = np.stack([np.sum(g * dx, axis=0), np.sum(g * dy, axis=0)], axis=-1)
        return gfeat, ggrid.reshape(gshape)


def bilinear_sample(features, grid) -> np.ndarray:
    return BilinearSample().forward(features, np.asarray(grid))


def select_level(points: np.ndarray, strides: Sequence[int], out_height: int) -> int:
    """Index into ``strides`` of the extraction level for one instance.

    Picks the stride (among 4, 8, 16 when present) closest to the instance's
    mean height divided by the crop height; ties go to the finer level.
    """
    n = len(points) // 2
    height = float(np.mean(np.linalg.norm(points[n:] - points[:n], axis=1)))
    cand = [i for i, s in enumerate(strides) if s in ARM_STRIDES] or list(range(len(strides)))
    want = height / out_height
    return min(cand, key=lambda i: (abs(strides[i] - want), strides[i]))


def image_to_level(points, stride):
    """Image pixels -> feature coordinates (cell centers at integers)."""
    return points / stride - 0.5


class ArmExtract:
    """Rectified crops ``(m, C, H_out, W_out)`` for ``m`` instances of one image.

    ``levels`` is a list of ``(C, H_s, W_s)`` maps with matching ``strides``;
    ``points`` is ``(m, 2 n_rcp, 2)`` in image pixels. ``force_level`` pins
    every instance to one level index.
    """

    def __init__(self, basis: TpsBasis, strides: Sequence[int], force_level=None):
        self.basis = basis
        self.strides = list(strides)
        self.force_level = force_level

    def forward(self, levels, points):
        m = len(points)
        c = levels[0].shape[0]
        ho, wo = self.basis.out_size
        out = np.zeros((m, c, ho, wo), dtype=levels[0].dtype)
        self.parts = []
        if m == 0:
            return out
        if self.force_level is not None:
            choice = np.full(m, self.force_level)
        else:
            choice = np.array([select_level(np.asarray(p), self.strides, ho) for p in points])
        for li in np.unique(choice):
            sel = np.nonzero(choice == li)[0]
            s = self.strides[li]
            grid_op, samp = TpsGrid(self.basis), BilinearSample()
            grid = grid_op.forward(image_to_level(points[sel], s))
            crops = samp.forward(levels[li], grid)  # (C, k, H, W)
            out[sel] = crops.transpose(1, 0, 2, 3)
            self.parts.append((int(li), sel, s, grid_op, samp))
        self.level_shapes = [lv.shape for lv in levels]
        self.dtype = levels[0].dtype
        return out

    def backward(self, gout):
        glevels = [None] * len(self.strides)
        gpoints = np.zeros(gout.shape[:1] + (2 * self.basis.n_rcp, 2), dtype=gout.dtype)
        for li, sel, s, grid_op, samp in self.parts:
            gfeat, ggrid = samp.backward(gout[sel].transpose(1, 0, 2, 3))
            glevels[li] = gfeat if glevels[li] is None else glevels[li] + gfeat
            gpoints[sel] = grid_op.backward(ggrid)[0] / s
        return glevels, gpoints


def arm_extract(pyramid, instances, basis: TpsBasis, strides=None, force_level=None):
    """Rectified feature crops for a list of ``RectCtrlPoints`` (forward only)."""
    if not instances:
        return []
    levels = list(pyramid)
    if strides is None:
        strides = ARM_STRIDES[: len(levels)]
    pts = np.stack([p.as_array() if hasattr(p, "as_array") else np.asarray(p) for p in instances])
    out = ArmExtract(basis, strides, force_level).forward(levels, pts.astype(levels[0].dtype))
    return list(out)


def rectify_image(image, points, n_rcp: int, out_size) -> np.ndarray:
    """Rectify image pixels (not features) for inspection: ``(3, H, W)`` -> ``(3, *out_size)``."""
    basis = build_tps_basis(n_rcp, out_size)
    image = np.asarray(image, dtype=np.float64)
    grid = TpsGrid(basis).forward(image_to_level(np.asarray(points, dtype=np.float64), 1))
    return BilinearSample().forward(image, grid)
