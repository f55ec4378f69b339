"""Cubic Bezier curves, rectification control points and polygon utilities.

Points are ``(n, 2)`` float arrays of ``(x, y)`` pixel coordinates with the
origin at the top-left corner and y pointing down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitError, DomainError, InsufficientDataError

__all__ = [
    "CubicBezier",
    "TextPolygon",
    "RectCtrlPoints",
    "bernstein",
    "bernstein_matrix",
    "bezier_eval",
    "fit_cubic_bezier",
    "sample_rcp",
    "rcp_from_polygon",
    "polygon_area",
    "points_in_polygon",
    "rasterize_polygon",
    "polygon_iou",
    "close_polygon",
]


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class CubicBezier:
    """Cubic Bezier curve given by its four control points ``C_0..C_3``."""

    c: np.ndarray

    def __post_init__(self):
        c = _as_points(self.c)
        if c.shape != (4, 2):
            raise ValueError(f"a cubic Bezier needs exactly 4 control points, got {c.shape[0]}")
        if not np.all(np.isfinite(c)):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "c", c)

    def __call__(self, t) -> np.ndarray:
        return bezier_eval(self, t)

    def transformed(self, matrix, offset=(0.0, 0.0)) -> "CubicBezier":
        """Image of the curve under ``p -> matrix @ p + offset``."""
        m = np.asarray(matrix, dtype=np.float64)
        return CubicBezier(self.c @ m.T + np.asarray(offset, dtype=np.float64))


@dataclass
class TextPolygon:
    """A text instance: top and bottom boundary chains (both left to right)."""

    top: np.ndarray
    bottom: np.ndarray
    transcript: str = ""

    def __post_init__(self):
        self.top = _as_points(self.top)
        self.bottom = _as_points(self.bottom)
        if len(self.top) < 2 or len(self.bottom) < 2:
            raise ValueError("top and bottom chains need at least 2 points each")

    @property
    def polygon(self) -> np.ndarray:
        return close_polygon(self.top, self.bottom)

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)

    def max_side(self) -> float:
        poly = self.polygon
        extent = poly.max(axis=0) - poly.min(axis=0)
        return float(extent.max())


@dataclass
class RectCtrlPoints:
    """The ``2 * n_rcp`` rectification control points of one instance."""

    top: np.ndarray
    bottom: np.ndarray

    def __post_init__(self):
        self.top = _as_points(self.top)
        self.bottom = _as_points(self.bottom)
        if self.top.shape != self.bottom.shape:
            raise ValueError("top and bottom rows must hold the same number of points")

    @property
    def n_rcp(self) -> int:
        return len(self.top)

    def as_array(self) -> np.ndarray:
        """Stacked ``(2 * n_rcp, 2)`` array, top row first."""
        return np.concatenate([self.top, self.bottom], axis=0)

    @classmethod
    def from_array(cls, arr) -> "RectCtrlPoints":
        arr = _as_points(arr)
        if len(arr) % 2:
            raise ValueError("control point array must have an even length")
        n = len(arr) // 2
        return cls(arr[:n], arr[n:])

    @property
    def polygon(self) -> np.ndarray:
        return close_polygon(self.top, self.bottom)

    def mean_height(self) -> float:
        return float(np.mean(np.linalg.norm(self.bottom - self.top, axis=1)))


def close_polygon(top, bottom) -> np.ndarray:
    """Closed polygon vertex list: top chain then the reversed bottom chain."""
    return np.concatenate([_as_points(top), _as_points(bottom)[::-1]], axis=0)


# ---------------------------------------------------------------------------
# Bernstein / Bezier
# ---------------------------------------------------------------------------


def bernstein(i: int, n: int, t: float) -> float:
    """Bernstein basis polynomial ``C(n, i) t^i (1 - t)^(n - i)``."""
    if not (0 <= i <= n):
        raise DomainError(f"basis index {i} outside 0..{n}")
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"parameter t={t} outside [0, 1]")
    return math.comb(n, i) * t**i * (1.0 - t) ** (n - i)


def bernstein_matrix(t, n: int = 3) -> np.ndarray:
    """``(len(t), n + 1)`` matrix of all degree-``n`` basis values."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
        raise DomainError("curve parameters must lie in [0, 1]")
    i = np.arange(n + 1)
    coeff = np.array([math.comb(n, k) for k in i], dtype=np.float64)
    return coeff * t[:, None] ** i * (1.0 - t[:, None]) ** (n - i)


def bezier_eval(curve: CubicBezier, t):
    """Evaluate the curve at scalar or array ``t``.

    Returns a ``(2,)`` point for scalar input and ``(len(t), 2)`` otherwise.
    """
    scalar = np.ndim(t) == 0
    pts = bernstein_matrix(t) @ curve.c
    if scalar:
        return pts[0]
    return pts


def chord_length_params(points) -> np.ndarray:
    pts = _as_points(points)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise DegenerateFitError("all points coincide")
    t = np.concatenate([[0.0], np.cumsum(seg) / total])
    t[-1] = 1.0
    return t


def fit_cubic_bezier(points, parameterization: str = "chord-length", t=None) -> CubicBezier:
    """Least-squares cubic Bezier through an ordered point chain.

    The end control points are pinned to the first and last input points and
    the two interior ones solve the 2x2 normal equations shared by x and y.
    ``parameterization="given"`` requires explicit parameters ``t``.
    """
    pts = _as_points(points)
    if len(pts) < 4:
        raise InsufficientDataError(f"need at least 4 points to fit a cubic, got {len(pts)}")

    if parameterization == "chord-length":
        t = chord_length_params(pts)
    elif parameterization == "uniform":
        t = np.linspace(0.0, 1.0, len(pts))
    elif parameterization == "given":
        if t is None:
            raise ValueError("parameterization='given' requires t")
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (len(pts),):
            raise ValueError("need one parameter per point")
    else:
        raise ValueError(f"unknown parameterization {parameterization!r}")

    B = bernstein_matrix(t)
    c0, c3 = pts[0], pts[-1]
    rhs = pts - np.outer(B[:, 0], c0) - np.outer(B[:, 3], c3)
    A = B[:, 1:3]
    normal = A.T @ A
    det = normal[0, 0] * normal[1, 1] - normal[0, 1] * normal[1, 0]
    scale = max(normal[0, 0] * normal[1, 1], 1e-300)
    if abs(det) <= 1e-12 * scale:
        raise DegenerateFitError("singular normal equations: interior parameters coincide")
    interior = np.linalg.solve(normal, A.T @ rhs)
    return CubicBezier(np.vstack([c0, interior, c3]))


def rcp_params(n_rcp: int) -> np.ndarray:
    """Endpoint-inclusive, uniformly spaced curve parameters."""
    if n_rcp < 2:
        raise DomainError(f"n_rcp must be >= 2, got {n_rcp}")
    return np.arange(n_rcp, dtype=np.float64) / (n_rcp - 1)


def sample_rcp(top: CubicBezier, bottom: CubicBezier, n_rcp: int) -> RectCtrlPoints:
    t = rcp_params(n_rcp)
    return RectCtrlPoints(bezier_eval(top, t), bezier_eval(bottom, t))


def rcp_from_polygon(poly: TextPolygon, n_rcp: int) -> RectCtrlPoints:
    """Ground-truth control points: refit both sides, then resample them."""
    return sample_rcp(fit_side(poly.top), fit_side(poly.bottom), n_rcp)


def fit_side(chain) -> CubicBezier:
    pts = _as_points(chain)
    if len(pts) < 4:
        # too short to fit: resample the polyline itself
        t = chord_length_params(pts)
        tt = np.linspace(0, 1, 4)
        pts = np.stack([np.interp(tt, t, pts[:, 0]), np.interp(tt, t, pts[:, 1])], axis=1)
    return fit_cubic_bezier(pts, "chord-length")


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------


def polygon_area(poly) -> float:
    """Unsigned shoelace area."""
    p = _as_points(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def points_in_polygon(points, poly) -> np.ndarray:
    """Even-odd containment test for many points at once."""
    pts = _as_points(points)
    p = _as_points(poly)
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    crossings = straddle & (px < xc)
    return (np.count_nonzero(crossings, axis=1) % 2) == 1


def rasterize_polygon(poly, x_centers, y_centers) -> np.ndarray:
    """Even-odd scanline fill sampled at the given pixel-center coordinates.

    Returns a boolean mask of shape ``(len(y_centers), len(x_centers))``.
    """
    p = _as_points(poly)
    xs = np.asarray(x_centers, dtype=np.float64)
    ys = np.asarray(y_centers, dtype=np.float64)
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yy = ys[:, None]
    straddle = (y0 > yy) != (y1 > yy)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (yy - y0) * (x1 - x0) / (y1 - y0)
    rows, edges = np.nonzero(straddle)
    # a crossing toggles parity for every sample strictly to its right
    idx = np.searchsorted(xs, xc[rows, edges], side="right")
    toggles = np.zeros((len(ys), len(xs) + 1), dtype=np.int32)
    np.add.at(toggles, (rows, idx), 1)
    parity = np.cumsum(toggles[:, :-1], axis=1) % 2
    return parity.astype(bool)


def polygon_iou(a, b, raster_px: int = 256, *, with_flag: bool = False):
    """IoU of two polygons by even-odd rasterization over their joint bounds.

    With ``with_flag=True`` returns ``(iou, degenerate)``; a degenerate
    (zero-area) input yields ``(0.0, True)``.
    """
    if raster_px < 64:
        raise DomainError(f"raster_px must be >= 64, got {raster_px}")
    pa, pb = _as_points(a), _as_points(b)
    if polygon_area(pa) <= 0.0 or polygon_area(pb) <= 0.0:
        return (0.0, True) if with_flag else 0.0
    both = np.vstack([pa, pb])
    lo, hi = both.min(axis=0), both.max(axis=0)
    ext = np.maximum(hi - lo, 1e-12)
    xs = lo[0] + (np.arange(raster_px) + 0.5) * ext[0] / raster_px
    ys = lo[1] + (np.arange(raster_px) + 0.5) * ext[1] / raster_px
    ma = rasterize_polygon(pa, xs, ys)
    mb = rasterize_polygon(pb, xs, ys)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return (0.0, True) if with_flag else 0.0
    iou = np.count_nonzero(ma & mb) / union
    return (float(iou), False) if with_flag else float(iou)
