"""Scalar loss operators (same forward/backward protocol as ``ops``)."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError
from .ops import log_softmax, sigmoid, softmax, softplus


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


class SmoothL1:
    """Mean Huber-style loss ``0.5 x^2 / beta`` inside ``|x| < beta``."""

    def __init__(self, beta=1.0):
        if beta <= 0:
            raise DomainError("beta must be positive")
        self.beta = beta

    def forward(self, pred, target):
        _check_same(pred, target)
        d = pred - target
        a = np.abs(d)
        quad = a < self.beta
        self.cache = (d, quad, max(d.size, 1))
        loss = np.where(quad, 0.5 * d * d / self.beta, a - 0.5 * self.beta)
        return loss.sum() / max(d.size, 1)

    def backward(self, g=1.0):
        d, quad, n = self.cache
        gd = np.where(quad, d / self.beta, np.sign(d)) * (g / n)
        return gd, -gd


class FocalLoss:
    """Sigmoid focal loss summed over ``mask`` and divided by ``max(1, #positives)``."""

    def __init__(self, alpha=0.25, gamma=2.0):
        self.alpha = alpha
        self.gamma = gamma

    def forward(self, logits, targets, mask=None, normalizer=None):
        _check_same(logits, targets)
        if mask is None:
            mask = np.ones_like(logits)
        y = targets
        p = sigmoid(logits)
        logp = -softplus(-logits)
        log1mp = -softplus(logits)
        a, gm = self.alpha, self.gamma
        pos = -a * (1.0 - p) ** gm * logp
        neg = -(1.0 - a) * p**gm * log1mp
        if normalizer is None:
            normalizer = float(np.sum(y * mask))
        norm = max(1.0, normalizer)
        self.cache = (p, logp, log1mp, y, mask, norm)
        return np.sum(mask * (y * pos + (1.0 - y) * neg)) / norm

    def backward(self, g=1.0):
        p, logp, log1mp, y, mask, norm = self.cache
        a, gm = self.alpha, self.gamma
        dpos = a * (1.0 - p) ** gm * (gm * p * logp - (1.0 - p))
        dneg = (1.0 - a) * p**gm * (p - gm * (1.0 - p) * log1mp)
        gz = mask * (y * dpos + (1.0 - y) * dneg) * (g / norm)
        return gz, None


class BCEWithLogits:
    """Mean binary cross-entropy over ``mask`` (normalized by ``max(1, |mask|)``)."""

    def forward(self, logits, targets, mask=None):
        _check_same(logits, targets)
        if mask is None:
            mask = np.ones_like(logits)
        norm = max(1.0, float(mask.sum()))
        self.cache = (logits, targets, mask, norm)
        loss = softplus(logits) - logits * targets
        return np.sum(mask * loss) / norm

    def backward(self, g=1.0):
        z, y, mask, norm = self.cache
        gz = mask * (sigmoid(z) - y) * (g / norm)
        return gz, None


class CrossEntropy:
    """Softmax cross-entropy over the last axis.

    Positions whose target equals ``pad_index`` are excluded from the mean.
    """

    def __init__(self, pad_index=None):
        self.pad_index = pad_index

    def forward(self, logits, targets):
        targets = np.asarray(targets)
        if logits.shape[:-1] != targets.shape:
            raise ShapeError(f"logits {logits.shape} incompatible with targets {targets.shape}")
        keep = np.ones(targets.shape, dtype=bool) if self.pad_index is None else targets != self.pad_index
        safe = np.where(keep, targets, 0)
        lsm = log_softmax(logits, axis=-1)
        picked = np.take_along_axis(lsm, safe[..., None], axis=-1)[..., 0]
        n = max(1, int(keep.sum()))
        self.cache = (logits, safe, keep, n)
        return -np.sum(picked * keep) / n

    def backward(self, g=1.0):
        logits, safe, keep, n = self.cache
        p = softmax(logits, axis=-1)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        gz = (p - onehot) * keep[..., None] * (g / n)
        return gz, None


def smooth_l1(pred, target, beta=1.0):
    return SmoothL1(beta).forward(pred, target)


def focal_loss(logits, targets, alpha=0.25, gamma=2.0, mask=None):
    return FocalLoss(alpha, gamma).forward(logits, targets, mask)


def bce(logits, targets, mask=None):
    return BCEWithLogits().forward(logits, targets, mask)


def cross_entropy(logits, class_indices, pad_index=None):
    return CrossEntropy(pad_index).forward(logits, class_indices)
