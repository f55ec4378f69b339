"""Loss assembly and the SGD training step for the three extraction modes.

* ``gt-extract``: recognition crops come from ground-truth control points, so
  the recognition loss reaches the backbone but never the offset head.
* ``rec-bp-l0``: crops come from predicted control points of sampled positive
  cells and the control-point regression loss is switched off.
* ``joint``: predicted control points and the regression loss together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..arm import ArmExtract, build_tps_basis, gen_grid
from ..geometry import rcp_from_polygon
from ..nn.losses import BCEWithLogits, CrossEntropy, FocalLoss, SmoothL1
from ..nn.optim import clip_grad_norm, sgd_momentum_step
from ..targets import cell_centers, make_targets, sample_positive_pixels
from .config import SpotterConfig, canonical_mode
from .model import SpotterModel, preprocess

log = logging.getLogger(__name__)


@dataclass
class LossRecord:
    total: float = 0.0
    cls: float = 0.0
    ctr: float = 0.0
    rcp: float = 0.0
    rec: float = 0.0
    num_pos: int = 0
    num_rec: int = 0
    skipped: bool = False
    no_positives: bool = False
    grad_norm: float = 0.0

    def weighted_total(self, config: SpotterConfig, lambda_rcp: float) -> float:
        return (config.lambda_det * (self.cls + self.ctr + lambda_rcp * self.rcp)
                + config.lambda_rec * self.rec)


IGNORE = -1  # decoder position excluded from the recognition loss


def slot_labels(text: str, charset: str, width: int, core: float = 0.6, columns=None,
                outside: int | None = None) -> np.ndarray:
    """Per-column targets for the parallel decoder.

    The word is split into ``len(text)`` equal slots; the central ``core``
    fraction of slot ``j`` is labelled with character ``j`` and every other
    column with the pad class (``len(charset)``), so adjacent equal characters
    stay separated by at least one pad column.

    ``columns`` gives, for each decoder position, its continuous column
    coordinate in the ground-truth crop. The default ``0 .. width-1`` is the
    ground-truth crop itself. Positions that fall off the word (``NaN``,
    or past either end) get ``outside`` (default: pad).
    """
    pad = len(charset)
    labels = np.full(width, pad, dtype=np.int64)
    n = len(text)
    if n == 0:
        return labels
    if n > width // 2:
        raise ValueError(f"transcript of length {n} does not fit {width} decoder positions")
    lookup = {ch: i for i, ch in enumerate(charset)}
    u = np.arange(width, dtype=np.float64) if columns is None else np.asarray(columns, dtype=np.float64)
    pos = (u + 0.5) * n / width
    inside = np.isfinite(pos) & (pos >= 0) & (pos < n)
    if outside is not None:
        labels[~inside] = outside
    pos = np.where(inside, pos, 0.0)
    j = np.floor(pos).astype(int)
    keep = inside & (np.abs(pos - j - 0.5) <= core / 2)
    for p in np.nonzero(keep)[0]:
        labels[p] = lookup[text[j[p]]]
    return labels


def crop_columns(basis, gt_points, crop_points, max_offset: float = 0.5) -> np.ndarray:
    """Where each column of a crop lands in the ground-truth crop.

    Both crops' midlines come from their TPS grids (row means). Every crop
    column's midline point is projected onto the ground-truth midline
    polyline, with the end segments extended. The result is a continuous
    ground-truth column coordinate, or ``NaN`` when the point lies more than
    ``max_offset`` text heights away from the ground-truth midline.
    """
    g_gt = gen_grid(basis, np.asarray(gt_points, dtype=np.float64))
    g_cr = gen_grid(basis, np.asarray(crop_points, dtype=np.float64))
    mid = g_gt.mean(axis=0)  # (W, 2)
    height = np.linalg.norm(g_gt[-1] - g_gt[0], axis=-1).mean()
    q = g_cr.mean(axis=0)
    a, d = mid[:-1], mid[1:] - mid[:-1]  # segments
    dd = np.maximum((d * d).sum(-1), 1e-12)
    t = ((q[:, None, :] - a[None]) * d[None]).sum(-1) / dd[None]  # (W, W-1)
    nseg = len(d)
    lo = np.full(nseg, 0.0)
    hi = np.full(nseg, 1.0)
    lo[0], hi[-1] = -np.inf, np.inf
    t = np.clip(t, lo, hi)
    foot = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(q[:, None, :] - foot, axis=-1)
    k = dist.argmin(axis=1)
    rows = np.arange(len(q))
    u = k + t[rows, k]
    u[dist[rows, k] > max_offset * max(height, 1e-9)] = np.nan
    return u


def image_targets(instances, image_size, config: SpotterConfig):
    maps = make_targets(instances, image_size, config.level_specs(), config.n_rcp,
                        config.shrink, config.end_trim)
    rcps = [rcp_from_polygon(p, config.n_rcp).as_array() for p in instances]
    return maps, rcps


@dataclass
class LossGrads:
    det: list  # per level (g_cls, g_ctr, g_off), already weighted
    rec_logits: np.ndarray | None


def total_loss(det_outs, maps_batch, rec_logits, transcripts, config: SpotterConfig,
               lambda_rcp: float | None = None, rec_columns=None):
    """Weighted detection + recognition loss with gradients w.r.t. the head outputs.

    Returns ``(LossRecord, LossGrads)``; ``LossRecord.total`` equals
    ``l_det * (cls + ctr + l_rcp * rcp) + l_rec * rec``.
    ``rec_columns`` (predicted-point crops) labels each decoder position by
    where it lands in the ground-truth crop (see ``crop_columns``).
    """
    if lambda_rcp is None:
        lambda_rcp = config.lambda_rcp
    dtype = det_outs[0].cls.dtype
    n_lv = len(det_outs)

    cls_l, ctr_l, off_l, cls_t, ctr_t, off_t, valid, posm = [], [], [], [], [], [], [], []
    for li, out in enumerate(det_outs):
        cls_l.append(out.cls[:, 0].reshape(-1))
        ctr_l.append(out.ctr[:, 0].reshape(-1))
        off_l.append(out.offsets.transpose(0, 2, 3, 1).reshape(-1, out.offsets.shape[1]))
        cls_t.append(np.stack([m[li].cls for m in maps_batch]).reshape(-1))
        ctr_t.append(np.stack([m[li].ctr for m in maps_batch]).reshape(-1))
        off_t.append(np.stack([m[li].rcp_offsets for m in maps_batch]).reshape(-1, out.offsets.shape[1]))
        valid.append(np.stack([m[li].valid_mask for m in maps_batch]).reshape(-1))
    sizes = [len(c) for c in cls_l]
    cls_all = np.concatenate(cls_l)
    cls_tgt = np.concatenate(cls_t).astype(dtype)
    valid_all = np.concatenate(valid).astype(dtype)
    pos = cls_tgt > 0
    num_pos = int(pos.sum())

    rec = LossRecord(num_pos=num_pos)
    focal = FocalLoss(config.focal_alpha, config.focal_gamma)
    rec.cls = float(focal.forward(cls_all, cls_tgt, valid_all, normalizer=float(num_pos)))
    g_cls = focal.backward(config.lambda_det)[0]

    ctr_all = np.concatenate(ctr_l)
    bce = BCEWithLogits()
    rec.ctr = float(bce.forward(ctr_all, np.concatenate(ctr_t).astype(dtype), pos.astype(dtype)))
    g_ctr = bce.backward(config.lambda_det)[0]

    off_all = np.concatenate(off_l)
    g_off = np.zeros_like(off_all)
    if num_pos:
        sl1 = SmoothL1(config.smooth_l1_beta)
        rec.rcp = float(sl1.forward(off_all[pos], np.concatenate(off_t)[pos].astype(dtype)))
        if lambda_rcp:
            g_off[pos] = sl1.backward(config.lambda_det * lambda_rcp)[0]
    else:
        rec.no_positives = True

    g_rec = None
    if rec_logits is not None and len(rec_logits):
        cols = rec_columns if rec_columns is not None else [None] * len(transcripts)
        labels = np.stack([
            slot_labels(t, config.charset, rec_logits.shape[1], config.label_core, c,
                        None if c is None else IGNORE)
            for t, c in zip(transcripts, cols)
        ])
        ce = CrossEntropy(pad_index=IGNORE)
        rec.rec = float(ce.forward(rec_logits, labels))
        g_rec = ce.backward(config.lambda_rec)[0]
        rec.num_rec = len(rec_logits)

    rec.total = rec.weighted_total(config, lambda_rcp)

    grads = []
    start = 0
    for li, out in enumerate(det_outs):
        n = sizes[li]
        sl = slice(start, start + n)
        start += n
        B, _, h, w = out.cls.shape
        gc = g_cls[sl].reshape(B, 1, h, w)
        gr = g_ctr[sl].reshape(B, 1, h, w)
        go = g_off[sl].reshape(B, h, w, -1).transpose(0, 3, 1, 2)
        grads.append((gc, gr, np.ascontiguousarray(go)))
    return rec, LossGrads(grads, g_rec)


def predicted_points(det_out, b, row, col, n_rcp):
    s = det_out.stride
    center = np.array([(col + 0.5) * s, (row + 0.5) * s], dtype=det_out.offsets.dtype)
    return det_out.offsets[b, :, row, col].reshape(2 * n_rcp, 2) + center


class Trainer:
    """Owns a model, its TPS basis and the optimizer schedule."""

    def __init__(self, model: SpotterModel, mode: str = "joint", lr: float = 0.01,
                 momentum: float = 0.9, clip_norm: float = 10.0):
        self.model = model
        self.config = model.config
        self.mode = canonical_mode(mode)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        cfg = self.config
        self.label_basis = build_tps_basis(cfg.n_rcp, tuple(cfg.arm_out))
        self.basis = self.label_basis.astype(model.dtype)

    @property
    def lambda_rcp(self) -> float:
        return 0.0 if self.mode == "rec-bp-l0" else self.config.lambda_rcp

    def step(self, images, instances_batch, seed: int = 0, lr: float | None = None) -> LossRecord:
        return train_step(self, images, instances_batch, seed=seed, lr=self.lr if lr is None else lr)


def compute_gradients(trainer: Trainer, images, instances_batch, seed: int = 0, targets=None) -> LossRecord:
    """Forward + backward for one batch; parameter gradients are left in the store.

    ``targets`` optionally holds precomputed ``image_targets`` per image.
    """
    model, cfg = trainer.model, trainer.config
    mode = trainer.mode
    x = preprocess(images).astype(model.dtype, copy=False)
    if x.ndim == 3:
        x = x[None]
    B, _, H, W = x.shape
    model.zero_grad()

    pyr, bcache = model.backbone_forward(x)
    det_outs, dcache = model.detection_forward(pyr)
    if targets is None:
        targets = [image_targets(inst, (H, W), cfg) for inst in instances_batch]
    maps_batch = [t[0] for t in targets]
    samples = sample_positive_pixels(maps_batch, cfg.n_text, seed)

    arm_strides = list(cfg.arm_strides)
    arm_parts = []
    crops, transcripts, columns = [], [], []
    for b in range(B):
        mine = [s for s in samples if s.image == b]
        if not mine:
            continue
        gt = [targets[b][1][s.instance_id] for s in mine]
        if mode == "gt-extract":
            pts = np.stack(gt).astype(model.dtype)
            columns.extend([None] * len(mine))
        else:
            pts = np.stack([predicted_points(det_outs[s.level], b, s.row, s.col, cfg.n_rcp) for s in mine])
            # label each decoder position by where the true glyphs fall in this crop
            columns.extend(crop_columns(trainer.label_basis, g, p) for g, p in zip(gt, pts))
        arm = ArmExtract(trainer.basis, arm_strides)
        crops.append(arm.forward([pyr[s][b] for s in arm_strides], pts))
        transcripts.extend(instances_batch[b][s.instance_id].transcript for s in mine)
        arm_parts.append((b, mine, arm))

    rec_logits, rcache = None, None
    if crops:
        crop_arr = np.concatenate(crops)
        rec_logits, rcache = model.recognition_forward(crop_arr)

    record, grads = total_loss(det_outs, maps_batch, rec_logits, transcripts, cfg, trainer.lambda_rcp,
                               columns)
    if record.no_positives:
        record.skipped = True
        return record

    det_grads = [list(g) for g in grads.det]
    gpyr_rec = {s: np.zeros_like(pyr[s]) for s in arm_strides}
    if grads.rec_logits is not None:
        gcrops = model.recognition_backward(rcache, grads.rec_logits)
        start = 0
        for b, mine, arm in arm_parts:
            k = len(mine)
            glevels, gpts = arm.backward(gcrops[start:start + k])
            start += k
            for s, gl in zip(arm_strides, glevels):
                if gl is not None:
                    gpyr_rec[s][b] += gl
            if mode != "gt-extract":
                for smp, gp in zip(mine, gpts):
                    det_grads[smp.level][2][b, :, smp.row, smp.col] += cfg.point_grad_scale * gp.reshape(-1)

    gpyr = model.detection_backward(dcache, det_grads)
    for s, g in gpyr_rec.items():
        gpyr[s] = gpyr[s] + g if s in gpyr else g
    model.backbone_backward(bcache, gpyr)
    return record


def train_step(trainer: Trainer, images, instances_batch, seed: int = 0, lr: float = 0.01,
               targets=None) -> LossRecord:
    """One SGD-momentum update on a batch; skipped when there are no positives."""
    record = compute_gradients(trainer, images, instances_batch, seed, targets)
    if record.skipped:
        log.info("step skipped: no positive cells in batch")
        return record
    record.grad_norm = clip_grad_norm(trainer.model.store, trainer.clip_norm)
    sgd_momentum_step(trainer.model.store, lr, trainer.momentum)
    return record


@dataclass
class Schedule:
    steps: int = 3000
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    warmup: int = 100
    decay_at: tuple = (0.7, 0.9)
    clip_norm: float = 10.0

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if step < self.warmup:
            lr *= (step + 1) / self.warmup
        for frac in self.decay_at:
            if step >= int(frac * self.steps):
                lr *= 0.1
        return lr


def fit(model: SpotterModel, images, annotations, schedule: Schedule, mode: str = "joint",
        seed: int = 0, callback=None) -> list[LossRecord]:
    """Train on an in-memory dataset (``images``: uint8 ``(N, 3, H, W)``)."""
    trainer = Trainer(model, mode, schedule.lr, schedule.momentum, schedule.clip_norm)
    rng = np.random.default_rng(seed)
    n = len(images)
    order = rng.permutation(n)
    cursor = 0
    history = []
    size = tuple(images.shape[2:])
    cache = {}  # targets are a pure function of the annotations; reuse them across epochs
    for step in range(schedule.steps):
        idx = []
        while len(idx) < schedule.batch_size:
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1
        batch = images[idx]
        insts = [annotations[i] for i in idx]
        for i in idx:
            if i not in cache:
                cache[i] = image_targets(annotations[i], size, model.config)
        rec = train_step(trainer, batch, insts, seed=seed * 1_000_003 + step, lr=schedule.lr_at(step),
                         targets=[cache[i] for i in idx])
        history.append(rec)
        if callback is not None:
            callback(step, rec)
    return history
