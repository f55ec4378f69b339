"""SGD with heavy-ball momentum."""

from __future__ import annotations

import math

import numpy as np

from ..errors import MissingGradientError
from .tensor import ParamStore


def sgd_momentum_step(store: ParamStore, lr: float, momentum: float = 0.9) -> ParamStore:
    """In-place update ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    for name, t in store.params.items():
        if t.grad is None:
            raise MissingGradientError(name)
    for name in store.names():
        t = store.params[name]
        v = store.momentum[name]
        v *= momentum
        v += t.grad
        t.data -= lr * v
    return store


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for t in store.params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = global_grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in store.params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm
