"""Dense per-cell training targets for the control-point detection head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError
from .geometry import (
    CubicBezier,
    TextPolygon,
    bezier_eval,
    fit_side,
    points_in_polygon,
    polygon_area,
    sample_rcp,
)

log = logging.getLogger(__name__)

VALID_STRIDES = (4, 8, 16, 32, 64, 128)

DEFAULT_SHRINK = 0.5
DEFAULT_END_TRIM = 0.15


@dataclass(frozen=True)
class LevelSpec:
    stride: int
    size_range: tuple = (0.0, math.inf)

    def __post_init__(self):
        if self.stride not in VALID_STRIDES:
            raise ValueError(f"stride {self.stride} not in {VALID_STRIDES}")
        lo, hi = self.size_range
        if not lo < hi:
            raise ValueError(f"empty size range {self.size_range}")


def default_levels() -> list[LevelSpec]:
    edges = [0.0, 64.0, 128.0, 256.0, 512.0, math.inf]
    return [LevelSpec(s, (edges[i], edges[i + 1])) for i, s in enumerate((8, 16, 32, 64, 128))]


@dataclass
class DenseTargetMaps:
    """Targets for one pyramid level of one image.

    ``owner`` holds the instance index of each positive cell (-1 elsewhere).
    """

    stride: int
    cls: np.ndarray
    ctr: np.ndarray
    rcp_offsets: np.ndarray
    valid_mask: np.ndarray
    owner: np.ndarray

    @property
    def shape(self):
        return self.cls.shape

    @property
    def num_positives(self) -> int:
        return int(self.cls.sum())


@dataclass(frozen=True, order=True)
class PositiveSample:
    image: int
    level: int
    row: int
    col: int
    instance_id: int

    @property
    def cell(self):
        return (self.row, self.col)


def cell_centers(shape, stride):
    """Image-pixel coordinates of cell centers, half-pixel convention."""
    h, w = shape
    xs = (np.arange(w) + 0.5) * stride
    ys = (np.arange(h) + 0.5) * stride
    return xs, ys


def band_curves(top: CubicBezier, bottom: CubicBezier, shrink: float):
    mid = 0.5 * (top.c + bottom.c)
    return (
        CubicBezier(mid + shrink * (top.c - mid)),
        CubicBezier(mid + shrink * (bottom.c - mid)),
    )


def _check_region_args(shrink, end_trim):
    if not 0.0 < shrink <= 1.0:
        raise DomainError(f"shrink must be in (0, 1], got {shrink}")
    if not 0.0 <= end_trim < 0.5:
        raise DomainError(f"end_trim must be in [0, 0.5), got {end_trim}")


def central_region(polygon: TextPolygon, shrink=DEFAULT_SHRINK, end_trim=DEFAULT_END_TRIM,
                   n_samples: int = 32) -> np.ndarray:
    """Closed polygon of the shrunk, end-trimmed band around the midline.

    An empty ``(0, 2)`` array is returned for degenerate instances.
    """
    _check_region_args(shrink, end_trim)
    curves = _fit_band(polygon, shrink)
    if curves is None:
        return np.zeros((0, 2))
    btop, bbot = curves
    t = np.linspace(end_trim, 1.0 - end_trim, n_samples)
    region = np.concatenate([bezier_eval(btop, t), bezier_eval(bbot, t)[::-1]])
    if polygon_area(region) <= 1e-9:
        return np.zeros((0, 2))
    return region


def _fit_band(polygon, shrink):
    if polygon.area <= 1e-9:
        return None
    try:
        top, bottom = fit_side(polygon.top), fit_side(polygon.bottom)
    except ValueError:
        return None
    return band_curves(top, bottom, shrink)


def band_coordinates(btop: CubicBezier, bbot: CubicBezier, points, iters: int = 10):
    """Invert ``P(t, s) = top(t) + s * (bottom(t) - top(t))`` for each point.

    Returns ``(t, s)`` arrays. Initialised from a dense mesh, refined by Newton.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0), np.zeros(0)
    tg = np.linspace(0, 1, 65)
    sg = np.linspace(0, 1, 9)
    T0, B0 = bezier_eval(btop, tg), bezier_eval(bbot, tg)
    mesh = T0[:, None, :] + sg[None, :, None] * (B0 - T0)[:, None, :]
    d2 = ((pts[:, None, None, :] - mesh[None]) ** 2).sum(-1).reshape(len(pts), -1)
    best = np.argmin(d2, axis=1)
    t = tg[best // len(sg)].copy()
    s = sg[best % len(sg)].copy()
    dtop = 3.0 * np.diff(btop.c, axis=0)
    dbot = 3.0 * np.diff(bbot.c, axis=0)
    for _ in range(iters):
        tc = np.clip(t, 0.0, 1.0)
        Bm = np.stack([(1 - tc) ** 3, 3 * tc * (1 - tc) ** 2, 3 * tc**2 * (1 - tc), tc**3], 1)
        Dm = np.stack([(1 - tc) ** 2, 2 * tc * (1 - tc), tc**2], 1)
        T, Bo = Bm @ btop.c, Bm @ bbot.c
        dT, dB = Dm @ dtop, Dm @ dbot
        P = T + s[:, None] * (Bo - T)
        r = P - pts
        j_t = dT + s[:, None] * (dB - dT)
        j_s = Bo - T
        det = j_t[:, 0] * j_s[:, 1] - j_t[:, 1] * j_s[:, 0]
        ok = np.abs(det) > 1e-12
        det = np.where(ok, det, 1.0)
        step_t = (j_s[:, 1] * r[:, 0] - j_s[:, 0] * r[:, 1]) / det
        step_s = (-j_t[:, 1] * r[:, 0] + j_t[:, 0] * r[:, 1]) / det
        t = t - np.where(ok, step_t, 0.0)
        s = s - np.where(ok, step_s, 0.0)
    return t, s


def band_centerness(u, v):
    """``sqrt((1 - |u|)(1 - |v|))`` with band coordinates ``u, v`` in [-1, 1]."""
    u = np.clip(np.abs(u), 0.0, 1.0)
    v = np.clip(np.abs(v), 0.0, 1.0)
    return np.sqrt((1.0 - u) * (1.0 - v))


def assign_level(polygon: TextPolygon, levels: Sequence[LevelSpec]) -> int:
    if not levels:
        raise ValueError("empty level list")
    side = polygon.max_side()
    for i, lv in enumerate(levels):
        lo, hi = lv.size_range
        if lo < side <= hi:
            return i
    # ranges partition (0, inf); only a zero-size instance reaches here
    return 0


def make_targets(instances: Sequence[TextPolygon], image_size, levels: Sequence[LevelSpec],
                 n_rcp: int, shrink=DEFAULT_SHRINK, end_trim=DEFAULT_END_TRIM) -> list[DenseTargetMaps]:
    _check_region_args(shrink, end_trim)
    H, W = image_size
    maps = []
    for lv in levels:
        h, w = H // lv.stride, W // lv.stride
        maps.append(DenseTargetMaps(
            stride=lv.stride,
            cls=np.zeros((h, w), dtype=np.float64),
            ctr=np.zeros((h, w), dtype=np.float64),
            rcp_offsets=np.zeros((h, w, 4 * n_rcp), dtype=np.float64),
            valid_mask=np.ones((h, w), dtype=np.float64),
            owner=np.full((h, w), -1, dtype=np.int64),
        ))

    # larger instances are rendered first so smaller ones overwrite overlaps
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].area, i))
    ignore = []
    for idx in order:
        poly = instances[idx]
        li = assign_level(poly, levels)
        m = maps[li]
        xs, ys = cell_centers(m.shape, m.stride)
        gx, gy = np.meshgrid(xs, ys)
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)

        region = central_region(poly, shrink, end_trim)
        inside = np.zeros(len(centers), dtype=bool)
        if len(region):
            inside = points_in_polygon(centers, region)
        if not inside.any():
            log.debug("instance %d has no positive cells", idx)
            ignore.append((li, points_in_polygon(centers, poly.polygon).reshape(m.shape)))
            continue

        top, bottom = fit_side(poly.top), fit_side(poly.bottom)
        rcp = sample_rcp(top, bottom, n_rcp).as_array()
        btop, bbot = band_curves(top, bottom, shrink)
        cells = np.nonzero(inside)[0]
        t, s = band_coordinates(btop, bbot, centers[cells])
        u = (t - end_trim) / (1.0 - 2.0 * end_trim) * 2.0 - 1.0
        v = 2.0 * s - 1.0

        rows, cols = np.divmod(cells, m.shape[1])
        m.cls[rows, cols] = 1.0
        m.ctr[rows, cols] = band_centerness(u, v)
        m.owner[rows, cols] = idx
        off = rcp[None, :, :] - centers[cells][:, None, :]
        m.rcp_offsets[rows, cols] = off.reshape(len(cells), -1)

    for li, mask in ignore:
        m = maps[li]
        m.valid_mask[mask & (m.cls == 0)] = 0.0
    return maps


def sample_positive_pixels(maps, n_text: int, rng_seed: int = 0) -> list[PositiveSample]:
    """Instance-stratified sample of positive cells.

    ``maps`` is either one image's per-level list or a batch (list of such
    lists); samples record the image index within the batch.
    """
    if n_text < 1:
        raise DomainError(f"n_text must be >= 1, got {n_text}")
    if maps and isinstance(maps[0], DenseTargetMaps):
        maps = [maps]

    pos = []
    for bi, levels in enumerate(maps):
        for li, m in enumerate(levels):
            rows, cols = np.nonzero(m.cls > 0)
            for r, c in zip(rows.tolist(), cols.tolist()):
                pos.append((bi, li, r, c, int(m.owner[r, c])))
    if not pos:
        log.warning("no positive cells to sample")
        return []

    rng = np.random.default_rng(rng_seed)
    pos_arr = np.array(pos, dtype=np.int64)
    keys = pos_arr[:, 0] * (1 << 32) + pos_arr[:, 4]
    inst_keys = np.unique(keys)
    quota = n_text // len(inst_keys)
    target = min(n_text, len(pos))

    taken = np.zeros(len(pos), dtype=bool)
    if quota:
        for k in inst_keys:
            members = np.nonzero(keys == k)[0]
            pick = rng.choice(members, size=min(quota, len(members)), replace=False)
            taken[pick] = True
    rest = target - int(taken.sum())
    if rest > 0:
        free = np.nonzero(~taken)[0]
        taken[rng.choice(free, size=rest, replace=False)] = True

    return sorted(PositiveSample(*map(int, pos_arr[i, [0, 1, 2, 3, 4]])) for i in np.nonzero(taken)[0])
