from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ConfigError
from ..synth import DEFAULT_CHARSET
from ..targets import LevelSpec

MODES = ("gt-extract", "rec-bp-l0", "joint")
MODE_ALIASES = {"rec-bp": "rec-bp-l0", "rec-bp-λ0": "rec-bp-l0", "rec-bp-lambda0": "rec-bp-l0"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass
class SpotterConfig:
    n_rcp: int = 8
    n_text: int = 64
    lambda_det: float = 1.0
    lambda_rec: float = 1.0
    lambda_rcp: float = 0.2
    charset: str = DEFAULT_CHARSET
    max_len: int = 32
    # detection levels as [stride, lo, hi] with half-open (lo, hi] size ranges
    levels: list = field(default_factory=lambda: [[4, 0.0, math.inf]])
    arm_strides: list = field(default_factory=lambda: [4, 8, 16])
    backbone_channels: list = field(default_factory=lambda: [16, 32, 48, 64, 64])
    channels: int = 32
    rec_channels: int = 32
    arm_out: list = field(default_factory=lambda: [8, 32])
    det_threshold: float = 0.4
    rec_threshold: float = 0.9
    nms_threshold: float = 0.5
    pre_nms_top_k: int = 50
    iou_raster_px: int = 128
    offset_scale: float = 16.0
    prior_size: list = field(default_factory=lambda: [64.0, 20.0])
    shrink: float = 0.5
    end_trim: float = 0.15
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    # multiplier on the recognition gradient that reaches predicted control points
    point_grad_scale: float = 0.1
    label_core: float = 0.6

    def __post_init__(self):
        self.levels = [list(lv) for lv in self.levels]
        self.arm_out = list(self.arm_out)

    @property
    def pad_index(self) -> int:
        return len(self.charset)

    @property
    def num_classes(self) -> int:
        return len(self.charset) + 1

    def level_specs(self) -> list[LevelSpec]:
        return [LevelSpec(int(s), (float(lo), float(hi))) for s, lo, hi in self.levels]

    @property
    def det_strides(self) -> list[int]:
        return [int(lv[0]) for lv in self.levels]

    def validate(self):
        for name in ("det_threshold", "rec_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.point_grad_scale >= 0:
            raise ConfigError(f"point_grad_scale must be >= 0, got {self.point_grad_scale}")
        h, w = self.arm_out
        if h % 4:
            raise ConfigError("arm_out height must be divisible by 4")
        if w < self.max_len:
            raise ConfigError(f"W_out={w} is smaller than max_len={self.max_len}")
        if self.n_rcp < 3:
            raise ConfigError("n_rcp must be >= 3")
        if len(set(self.charset)) != len(self.charset):
            raise ConfigError("charset symbols must be unique")
        if self.lambda_rcp < 0:
            raise ConfigError("lambda_rcp must be non-negative")
        try:
            specs = self.level_specs()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        edges = [specs[0].size_range[0]]
        for i, lv in enumerate(specs):
            if lv.size_range[0] != edges[-1]:
                raise ConfigError("level size ranges must partition (0, inf)")
            edges.append(lv.size_range[1])
        if edges[0] != 0.0 or not math.isinf(edges[-1]):
            raise ConfigError("level size ranges must partition (0, inf)")
        if len(self.backbone_channels) != 5:
            raise ConfigError("backbone_channels needs 5 entries (strides 2..32)")
        return self
