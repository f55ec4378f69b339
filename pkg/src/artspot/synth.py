"""Deterministic synthetic curved-text images with polygon annotations.

Glyphs are small hand-drawn bitmaps rendered along random cubic Bezier
ribbons, so no font or image assets are needed.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DatasetParseError
from .geometry import CubicBezier, TextPolygon, bezier_eval, rasterize_polygon

log = logging.getLogger(__name__)

_GLYPH_ROWS = {
    "A": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "B": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "C": [".####", "#....", "#....", "#....", "#....", "#....", ".####"],
    "D": ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
    "E": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "H": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "K": ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    "L": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "N": ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
    "P": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    "T": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "X": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
}

DEFAULT_CHARSET = "".join(_GLYPH_ROWS)

# glyph box inside its slot along the ribbon, and inside the ribbon height
GLYPH_WIDTH_FRAC = 1.0 / 1.4
GLYPH_HEIGHT_FRAC = 0.7
ANNOTATION_POINTS = 10


@dataclass(frozen=True)
class GlyphAtlas:
    glyphs: dict

    @classmethod
    def default(cls) -> "GlyphAtlas":
        return cls({k: np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float64)
                    for k, rows in _GLYPH_ROWS.items()})

    @property
    def charset(self) -> str:
        return "".join(self.glyphs)

    def stack(self, charset) -> np.ndarray:
        return np.stack([self.glyphs[ch] for ch in charset])


@dataclass
class SynthSpec:
    image_size: tuple = (128, 256)
    instances_per_image: tuple = (1, 3)
    text_len: tuple = (3, 8)
    curvature: float = 0.25
    height_px: tuple = (16.0, 28.0)
    rotation: tuple = (-15.0, 15.0)
    noise_std: float = 0.02
    charset: str = DEFAULT_CHARSET

    def validate(self):
        for name in ("instances_per_image", "text_len", "height_px", "rotation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range {lo}..{hi}")
        if self.rotation[0] < -45 or self.rotation[1] > 45:
            raise ConfigError("rotation must lie within [-45, 45] degrees")
        if self.curvature < 0 or self.noise_std < 0:
            raise ConfigError("curvature and noise_std must be non-negative")
        if self.instances_per_image[0] < 0 or self.text_len[0] < 1:
            raise ConfigError("instance and text-length ranges must be positive")
        atlas = GlyphAtlas.default()
        missing = set(self.charset) - set(atlas.glyphs)
        if missing:
            raise ConfigError(f"no glyphs for symbols {sorted(missing)}")
        return self


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    instances: list
    midlines: list = field(default_factory=list)


def _arc_table(curve: CubicBezier, n=512):
    t = np.linspace(0.0, 1.0, n)
    pts = bezier_eval(curve, t)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return t, pts, s


def _curve_frames(curve: CubicBezier, t):
    c = curve.c
    d = 3.0 * np.diff(c, axis=0)
    tt = np.asarray(t)[:, None]
    deriv = (1 - tt) ** 2 * d[0] + 2 * tt * (1 - tt) * d[1] + tt**2 * d[2]
    dd = 6.0 * ((1 - tt) * (c[2] - 2 * c[1] + c[0]) + tt * (c[3] - 2 * c[2] + c[1]))
    speed = np.linalg.norm(deriv, axis=1)
    tangent = deriv / speed[:, None]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    cross = deriv[:, 0] * dd[:, 1] - deriv[:, 1] * dd[:, 0]
    curvature = np.abs(cross) / np.maximum(speed**3, 1e-12)
    return tangent, normal, curvature


class _Ribbon:
    """A text ribbon: midline curve, height, arc-length parameterization."""

    def __init__(self, midline: CubicBezier, height: float):
        self.midline = midline
        self.height = height
        self.t, self.pts, self.s = _arc_table(midline)
        self.length = self.s[-1]
        self.tangent, self.normal, self.kappa = _curve_frames(midline, self.t)

    def t_at_u(self, u):
        return np.interp(np.asarray(u) * self.length, self.s, self.t)

    def sides(self, n_points):
        t = self.t_at_u(np.linspace(0.0, 1.0, n_points))
        m = bezier_eval(self.midline, t)
        _, nrm, _ = _curve_frames(self.midline, t)
        half = 0.5 * self.height
        return m - half * nrm, m + half * nrm

    def local_coords(self, pts):
        """Arc-length fraction ``u`` and signed normal offset ``v`` per point."""
        tree = cKDTree(self.pts)
        _, i = tree.query(pts)
        d = pts - self.pts[i]
        along = np.sum(d * self.tangent[i], axis=1)
        u = (self.s[i] + along) / self.length
        v = np.sum(d * self.normal[i], axis=1)
        return u, v


def _make_ribbon(rng, spec: SynthSpec, n_chars: int):
    height = rng.uniform(*spec.height_px)
    glyph_w = GLYPH_HEIGHT_FRAC * height * 5.0 / 7.0
    length = n_chars * glyph_w / GLYPH_WIDTH_FRAC
    theta = math.radians(rng.uniform(*spec.rotation))
    d1, d2 = rng.uniform(-spec.curvature, spec.curvature, size=2) * length
    ctrl = np.array([[0.0, 0.0], [length / 3, d1], [2 * length / 3, d2], [length, 0.0]])
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    curve = CubicBezier(ctrl @ rot.T)
    # rescale so the arc length (not the chord) matches the text length
    _, _, s = _arc_table(curve)
    curve = CubicBezier(curve.c * (length / s[-1]))
    return _Ribbon(curve, height)


def _random_colors(rng):
    bg_lum = rng.uniform(0.0, 1.0)
    fg_lum = bg_lum - 0.55 if bg_lum > 0.5 else bg_lum + 0.55
    tint = rng.uniform(-0.15, 0.15, size=3)
    bg = np.clip(bg_lum + tint, 0, 1)
    fg = np.clip(fg_lum + rng.uniform(-0.15, 0.15, size=3), 0, 1)
    grad = rng.uniform(-0.1, 0.1, size=(3, 2))
    return bg, fg, grad


def _sample_bitmap(bitmap, gx, gy):
    """Bilinear lookup of a ``(7, 5)`` bitmap at unit-square coords (zero border)."""
    gh, gw = bitmap.shape
    padded = np.pad(bitmap, 1)
    x = gx * gw - 0.5 + 1.0
    y = gy * gh - 0.5 + 1.0
    x = np.clip(x, 0.0, gw + 1.0 - 1e-9)
    y = np.clip(y, 0.0, gh + 1.0 - 1e-9)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, gw + 1), np.minimum(y0 + 1, gh + 1)
    wx, wy = x - x0, y - y0
    return ((1 - wy) * ((1 - wx) * padded[y0, x0] + wx * padded[y0, x1])
            + wy * ((1 - wx) * padded[y1, x0] + wx * padded[y1, x1]))


def render_sample(spec: SynthSpec, seed: int, noise: bool = True) -> Sample:
    spec.validate()
    rng = np.random.default_rng(seed)
    atlas = GlyphAtlas.default()
    H, W = spec.image_size
    bg, fg_base, grad = _random_colors(rng)
    yy, xx = np.mgrid[0:H, 0:W]
    xn, yn = xx / max(W - 1, 1) - 0.5, yy / max(H - 1, 1) - 0.5
    image = bg[:, None, None] + grad[:, 0, None, None] * xn + grad[:, 1, None, None] * yn
    image = np.clip(image, 0.0, 1.0)

    n_inst = int(rng.integers(spec.instances_per_image[0], spec.instances_per_image[1] + 1))
    occupied = np.zeros((H, W), dtype=bool)
    xs_c, ys_c = np.arange(W) + 0.5, np.arange(H) + 0.5
    instances, midlines = [], []
    margin = 2.0
    for k in range(n_inst):
        placed = False
        for _attempt in range(20):
            n_chars = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
            text = "".join(rng.choice(list(spec.charset), size=n_chars))
            rib = _make_ribbon(rng, spec, n_chars)
            if rib.kappa.max() * rib.height > 1.5:
                continue  # inner offset curve would fold over
            top, bottom = rib.sides(ANNOTATION_POINTS)
            poly = np.concatenate([top, bottom[::-1]])
            lo, hi = poly.min(axis=0), poly.max(axis=0)
            room = np.array([W, H]) - 2 * margin - (hi - lo)
            if np.any(room <= 0):
                continue
            shift = margin - lo + rng.uniform(0, 1, size=2) * room
            mask = rasterize_polygon(poly + shift, xs_c, ys_c)
            grown = mask.copy()
            for ax in (0, 1):
                for d in (-3, 3):
                    grown |= np.roll(mask, d, axis=ax)
            if np.any(grown & occupied):
                continue
            placed = True
            break
        if not placed:
            log.info("seed %d: instance %d did not fit after 20 retries", seed, k)
            continue
        occupied |= mask
        midline = CubicBezier(rib.midline.c + shift)
        rib = _Ribbon(midline, rib.height)
        top, bottom = top + shift, bottom + shift
        fg = fg_base

        rows, cols = np.nonzero(mask)
        pts = np.stack([cols + 0.5, rows + 0.5], axis=1).astype(np.float64)
        u, v = rib.local_coords(pts)
        slot = u * n_chars
        j = np.floor(slot).astype(int)
        inside = (j >= 0) & (j < n_chars)
        lx = slot - j
        gx = (lx - 0.5) / GLYPH_WIDTH_FRAC + 0.5
        gy = (v / rib.height + 0.5 - (1 - GLYPH_HEIGHT_FRAC) / 2) / GLYPH_HEIGHT_FRAC
        inside &= (gx >= 0) & (gx <= 1) & (gy >= 0) & (gy <= 1)
        alpha = np.zeros(len(pts))
        for ci in np.unique(j[inside]):
            sel = inside & (j == ci)
            alpha[sel] = _sample_bitmap(atlas.glyphs[text[ci]], gx[sel], gy[sel])
        a = alpha[None, :]
        image[:, rows, cols] = image[:, rows, cols] * (1 - a) + fg[:, None] * a

        instances.append(TextPolygon(top, bottom, text))
        midlines.append(midline)

    if noise and spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, instances, midlines)


# ---------------------------------------------------------------------------
# On-disk format: binary PPM images + one JSON object per line
# ---------------------------------------------------------------------------


def write_ppm(path, image):
    """Write a ``(3, H, W)`` float image in [0, 1] as binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_ppm(path, as_uint8=False) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    raw = np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8)
    if raw.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    img = raw.reshape(h, w, 3).transpose(2, 0, 1)
    if as_uint8:
        return np.ascontiguousarray(img)
    return img.astype(np.float32) / np.float32(255.0)


def _instance_json(inst: TextPolygon):
    return {"top": inst.top.tolist(), "bottom": inst.bottom.tolist(), "text": inst.transcript}


def write_dataset(samples, directory):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        rel = f"images/{i:06d}.ppm"
        write_ppm(directory / rel, s.image)
        lines.append(json.dumps({"image": rel, "instances": [_instance_json(x) for x in s.instances]}))
    with open(directory / "annotations.jsonl", "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def _normalized(top, bottom, text):
    """Both chains left to right; a bottom chain in polygon order is flipped."""
    if top.ndim != 2 or bottom.ndim != 2 or len(top) < 2 or len(bottom) < 2:
        raise ValueError("top and bottom need at least 2 [x, y] points each")
    if np.dot(top[-1] - top[0], bottom[-1] - bottom[0]) < 0:
        bottom = bottom[::-1]
    if top[-1, 0] < top[0, 0]:
        top, bottom = top[::-1], bottom[::-1]
    return TextPolygon(top, bottom, text)


def parse_annotations(path):
    """``[(relative image path, [TextPolygon, ...]), ...]`` from a JSONL file."""
    records = []
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                insts = [_normalized(np.array(d["top"], dtype=np.float64),
                                     np.array(d["bottom"], dtype=np.float64), str(d["text"]))
                         for d in obj["instances"]]
                records.append((str(obj["image"]), insts))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(path, no, f"malformed annotation: {exc}") from exc
    return records


def read_dataset(directory, as_uint8=False) -> list[Sample]:
    directory = Path(directory)
    return [Sample(read_ppm(directory / rel, as_uint8=as_uint8), insts)
            for rel, insts in parse_annotations(directory / "annotations.jsonl")]


def generate(spec: SynthSpec, count: int, base_seed: int = 0):
    for i in range(count):
        yield render_sample(spec, base_seed + i)
