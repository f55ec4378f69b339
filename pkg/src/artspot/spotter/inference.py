"""Inference: dense scores -> NMS -> rectification -> parallel decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..arm import ArmExtract, build_tps_basis
from ..geometry import RectCtrlPoints, close_polygon, polygon_iou
from ..nn.ops import sigmoid, softmax
from ..targets import cell_centers
from .model import SpotterModel, preprocess


@dataclass
class TextPrediction:
    polygon: np.ndarray  # (2 n_rcp, 2): top chain then reversed bottom
    det_score: float
    transcript: str = ""
    char_scores: list = field(default_factory=list)
    points: np.ndarray | None = None  # (2 n_rcp, 2), top first

    @property
    def rec_score(self) -> float:
        """Mean character score; 0 for an empty transcript."""
        return float(np.mean(self.char_scores)) if self.char_scores else 0.0


def points_polygon(points) -> np.ndarray:
    n = len(points) // 2
    return close_polygon(points[:n], points[n:])


def decode(logits, charset: str):
    """Greedy parallel decode: per-position argmax, merge repeats, drop pads.

    Returns ``(transcript, char_scores)`` where each character's score is the
    best probability inside its run of positions.
    """
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    best = probs.argmax(axis=-1)
    pad = len(charset)
    chars, scores = [], []
    prev = -1
    for k, c in enumerate(best.tolist()):
        if c != prev and c != pad:
            chars.append(charset[c])
            scores.append(float(probs[k, c]))
        elif c == prev and c != pad:
            scores[-1] = max(scores[-1], float(probs[k, c]))
        prev = c
    return "".join(chars), scores


def nms(polygons, scores, threshold=0.5, raster_px=128) -> list[int]:
    """Greedy NMS in descending score order; returns kept indices."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(polygon_iou(polygons[i], polygons[j], raster_px) <= threshold for j in keep):
            keep.append(i)
    return keep


def candidates(det_outs, b: int, threshold: float, n_rcp: int):
    """Cells scoring above ``threshold`` as ``(scores, points)`` sorted by score."""
    scores, points = [], []
    for out in det_outs:
        score = np.sqrt(sigmoid(out.cls[b, 0].astype(np.float64)) * sigmoid(out.ctr[b, 0].astype(np.float64)))
        rows, cols = np.nonzero(score > threshold)
        if not len(rows):
            continue
        xs, ys = cell_centers(score.shape, out.stride)
        centers = np.stack([xs[cols], ys[rows]], axis=1)
        off = out.offsets[b][:, rows, cols].T.astype(np.float64).reshape(-1, 2 * n_rcp, 2)
        scores.append(score[rows, cols])
        points.append(off + centers[:, None, :])
    if not scores:
        return np.zeros(0), np.zeros((0, 2 * n_rcp, 2))
    scores = np.concatenate(scores)
    points = np.concatenate(points)
    order = np.argsort(-scores, kind="stable")
    return scores[order], points[order]


class Predictor:
    """Holds the TPS basis so repeated calls do not rebuild it."""

    def __init__(self, model: SpotterModel):
        self.model = model
        cfg = model.config
        self.basis = build_tps_basis(cfg.n_rcp, tuple(cfg.arm_out)).astype(model.dtype)

    def detect(self, image):
        """Backbone + detection + NMS; returns ``(pyramid, scores, points)``."""
        model, cfg = self.model, self.model.config
        x = preprocess(np.asarray(image)[None]).astype(model.dtype, copy=False)
        pyr, _ = model.backbone_forward(x)
        det_outs, _ = model.detection_forward(pyr)
        scores, points = candidates(det_outs, 0, cfg.det_threshold, cfg.n_rcp)
        scores, points = scores[: cfg.pre_nms_top_k], points[: cfg.pre_nms_top_k]
        polys = [points_polygon(p) for p in points]
        keep = nms(polys, scores.tolist(), cfg.nms_threshold, cfg.iou_raster_px)
        return pyr, scores[keep], points[keep]

    def rectify(self, pyr, points):
        """Rectified feature crops ``(m, C, H_out, W_out)`` for points in image pixels."""
        cfg = self.model.config
        arm = ArmExtract(self.basis, cfg.arm_strides)
        levels = [pyr[s][0] for s in cfg.arm_strides]
        return arm.forward(levels, np.asarray(points, dtype=self.model.dtype))

    def recognize(self, pyr, points):
        cfg = self.model.config
        if not len(points):
            return []
        crops = self.rectify(pyr, points)
        logits, _ = self.model.recognition_forward(crops)
        return [decode(lg, cfg.charset) for lg in logits]

    def __call__(self, image, apply_rec_threshold: bool = True) -> list[TextPrediction]:
        cfg = self.model.config
        pyr, scores, points = self.detect(image)
        preds = []
        for s, p, (text, cs) in zip(scores, points, self.recognize(pyr, points)):
            preds.append(TextPrediction(points_polygon(p), float(s), text, cs, p))
        if apply_rec_threshold:
            preds = [p for p in preds if p.rec_score >= cfg.rec_threshold]
        return preds


def infer(image, model: SpotterModel, apply_rec_threshold: bool = True) -> list[TextPrediction]:
    """Predictions for one ``(3, H, W)`` image (uint8 or float in [0, 1])."""
    return Predictor(model)(image, apply_rec_threshold)


def ctrl_points(pred: TextPrediction) -> RectCtrlPoints:
    return RectCtrlPoints.from_array(pred.points)
