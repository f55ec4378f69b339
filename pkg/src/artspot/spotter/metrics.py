"""Detection / end-to-end metrics, IoU-binned recognition accuracy, feature shift."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, InsufficientDataError
from ..geometry import polygon_iou, rcp_from_polygon
from .inference import Predictor, TextPrediction, points_polygon

log = logging.getLogger(__name__)

IOU_BIN_EDGES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def _by_image(items, what):
    """Normalize a mapping, a list of ``(image_id, items)`` pairs or a plain list."""
    if isinstance(items, Mapping):
        return dict(items)
    items = list(items)
    if items and all(isinstance(x, tuple) and len(x) == 2 and not hasattr(x[1], "polygon") for x in items):
        out = {}
        for key, val in items:
            if key in out:
                raise DomainError(f"duplicate image id {key!r} in {what}")
            out[key] = list(val)
        return out
    return {i: list(v) for i, v in enumerate(items)}


def _polygon(x):
    p = x.polygon
    return p() if callable(p) else p


def iou_matrix(preds, gts, raster_px=128) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            m[i, j] = polygon_iou(_polygon(p), _polygon(g), raster_px)
    return m


def greedy_match(iou, threshold=0.5, allowed=None, inclusive=False):
    """One-to-one matching by descending IoU; returns ``[(pred, gt, iou)]``."""
    ok = iou >= threshold if inclusive else iou > threshold
    if allowed is not None:
        ok &= allowed
    pi, gi = np.nonzero(ok)
    order = sorted(range(len(pi)), key=lambda k: (-iou[pi[k], gi[k]], pi[k], gi[k]))
    used_p, used_g, out = set(), set(), []
    for k in order:
        p, g = int(pi[k]), int(gi[k])
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        out.append((p, g, float(iou[p, g])))
    return out


def _prf(tp, n_pred, n_gt):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def evaluate(predictions, annotations, iou_threshold=0.5, raster_px=128) -> dict:
    """Detection and end-to-end precision / recall / F.

    Both arguments are per-image collections (mapping, ``(id, items)`` pairs
    or an aligned list). End-to-end matches also need an exact transcript.
    """
    preds = _by_image(predictions, "predictions")
    gts = _by_image(annotations, "annotations")
    unknown = set(preds) - set(gts)
    if unknown:
        raise DomainError(f"predictions for unknown image ids: {sorted(unknown)[:5]}")
    det_tp = e2e_tp = n_pred = n_gt = 0
    for key, gt in gts.items():
        pr = preds.get(key, [])
        n_pred += len(pr)
        n_gt += len(gt)
        if not pr or not gt:
            continue
        iou = iou_matrix(pr, gt, raster_px)
        det_tp += len(greedy_match(iou, iou_threshold))
        same = np.array([[p.transcript == g.transcript for g in gt] for p in pr])
        e2e_tp += len(greedy_match(iou, iou_threshold, allowed=same))
    dp, dr, df = _prf(det_tp, n_pred, n_gt)
    ep, er, ef = _prf(e2e_tp, n_pred, n_gt)
    return {
        "det_precision": dp, "det_recall": dr, "det_f": df,
        "e2e_precision": ep, "e2e_recall": er, "e2e_f": ef,
        "num_predictions": n_pred, "num_annotations": n_gt,
    }


@dataclass
class IouBin:
    lo: float
    hi: float
    count: int
    correct: int

    @property
    def accuracy(self):
        """Fraction of exact transcripts; ``None`` for an empty bin."""
        return self.correct / self.count if self.count else None


def iou_bin_analysis(predictions, annotations, bins=IOU_BIN_EDGES, raster_px=128) -> list[IouBin]:
    """Recognition accuracy of matched predictions grouped by detection IoU.

    Bins are ``[lo, hi)`` except the last, which is closed. Predictions are
    matched one-to-one with IoU >= ``bins[0]``.
    """
    edges = [float(b) for b in bins]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])) or edges[0] < 0 or edges[-1] > 1:
        raise DomainError("bin edges must be strictly ascending within [0, 1]")
    preds = _by_image(predictions, "predictions")
    gts = _by_image(annotations, "annotations")
    out = [IouBin(lo, hi, 0, 0) for lo, hi in zip(edges, edges[1:])]
    for key, gt in gts.items():
        pr = preds.get(key, [])
        if not pr or not gt:
            continue
        for p, g, v in greedy_match(iou_matrix(pr, gt, raster_px), edges[0], inclusive=True):
            k = int(np.searchsorted(edges, v, side="right")) - 1
            k = min(k, len(out) - 1)
            if k < 0:
                continue
            out[k].count += 1
            out[k].correct += int(pr[p].transcript == gt[g].transcript)
    return out


def frechet_distance(a, b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` between row samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("need at least 2 samples per condition")
    mu = a.mean(0) - b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    # tr sqrt(Sa Sb) = tr sqrt(Sa^1/2 Sb Sa^1/2), the latter symmetric PSD
    w, v = np.linalg.eigh(sa)
    ra = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    mid = np.linalg.eigvalsh(ra @ sb @ ra)
    tr_sqrt = float(np.sqrt(np.clip(mid, 0, None)).sum())
    d = float(mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def instance_features(predictor: Predictor, pyr, points) -> np.ndarray:
    """Per-instance recognizer feature: conv stack, height-average, width-average."""
    crops = predictor.rectify(pyr, points)
    seq, _ = predictor.model.recognition_features(crops)
    return seq.mean(axis=2).astype(np.float64)


def collect_shift_features(model, images, annotations, raster_px=128):
    """GT-point and matched predicted-point features for every detected instance."""
    predictor = Predictor(model)
    n = model.config.n_rcp
    gt_feats, pred_feats = [], []
    for img, gt in zip(images, annotations):
        if not gt:
            continue
        pyr, scores, points = predictor.detect(img)
        if not len(points):
            continue
        pr = [TextPrediction(points_polygon(p), float(s)) for s, p in zip(scores, points)]
        matches = greedy_match(iou_matrix(pr, gt, raster_px), 0.5)
        if not matches:
            continue
        gpts = np.stack([rcp_from_polygon(gt[g], n).as_array() for _, g, _ in matches])
        ppts = np.stack([points[p] for p, _, _ in matches])
        gt_feats.append(instance_features(predictor, pyr, gpts))
        pred_feats.append(instance_features(predictor, pyr, ppts))
    if not gt_feats:
        raise InsufficientDataError("no matched detections to compare")
    return np.concatenate(gt_feats), np.concatenate(pred_feats)


def feature_shift_diagnostic(model, images, annotations, raster_px=128) -> float:
    """Frechet distance between recognizer features under GT vs predicted points."""
    a, b = collect_shift_features(model, images, annotations, raster_px)
    return frechet_distance(a, b)


def predict_dataset(model, images, progress=None):
    """All post-NMS predictions per image (no recognition threshold applied)."""
    predictor = Predictor(model)
    out = []
    for i, img in enumerate(images):
        out.append(predictor(img, apply_rec_threshold=False))
        if progress is not None:
            progress(i)
    return out


def evaluate_predictions(all_preds, annotations, rec_threshold, raster_px=128) -> dict:
    """Detection scored on every prediction, end-to-end on rec-thresholded ones."""
    det = evaluate(all_preds, annotations, raster_px=raster_px)
    kept = [[p for p in pr if p.rec_score >= rec_threshold] for pr in all_preds]
    e2e = evaluate(kept, annotations, raster_px=raster_px)
    out = {k: v for k, v in det.items() if k.startswith("det_")}
    out.update({k: v for k, v in e2e.items() if k.startswith("e2e_")})
    out["num_predictions"] = det["num_predictions"]
    out["num_e2e_predictions"] = e2e["num_predictions"]
    out["num_annotations"] = det["num_annotations"]
    return out


def evaluate_dataset(model, images, annotations) -> dict:
    cfg = model.config
    preds = predict_dataset(model, images)
    return evaluate_predictions(preds, annotations, cfg.rec_threshold, cfg.iou_raster_px)
