"""Central finite-difference verification of operator backward passes."""

from __future__ import annotations

import numpy as np

from ..errors import ArtspotError, DomainError


class NonFiniteError(ArtspotError, FloatingPointError):
    pass


def _project(out, weights):
    return float(np.sum(np.asarray(out, dtype=np.float64) * weights))


def grad_check(op, inputs, eps: float = 1e-3, wrt=None, seed: int = 0) -> float:
    """Max relative error between ``op.backward`` and central differences.

    The output is reduced to a scalar with fixed random weights (a plain sum
    would hide errors in directions it annihilates, e.g. softmax). ``wrt``
    selects which inputs to probe; by default every input whose analytic
    gradient is not ``None``. Inputs must be float64.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise DomainError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    inputs = [np.array(x, dtype=np.float64) if isinstance(x, np.ndarray) and x.dtype.kind == "f" else x
              for x in inputs]
    out = op.forward(*inputs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("forward pass produced non-finite values")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(np.shape(out)) if np.ndim(out) else np.float64(1.0)
    grads = op.backward(np.asarray(weights, dtype=np.float64))
    if wrt is None:
        wrt = [i for i, g in enumerate(grads) if g is not None]

    worst = 0.0
    for i in wrt:
        x = inputs[i]
        analytic = np.asarray(grads[i], dtype=np.float64)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = _project(op.forward(*inputs), weights)
            flat[j] = orig - eps
            fm = _project(op.forward(*inputs), weights)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite forward while probing input {i}")
            fd = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            worst = max(worst, err)
    return worst
