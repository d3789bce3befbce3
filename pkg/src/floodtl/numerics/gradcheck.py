"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               analytic: Sequence[np.ndarray] | None = None) -> float:
    """Largest relative disagreement between backward and central differences.

    ``f`` closes over ``inputs`` and returns a scalar Tensor. For each input the
    error is max|analytic - numeric| / max(max|analytic|, max|numeric|), so a
    gradient that is off by a factor of two scores 0.5. Numeric derivatives are
    taken on a float64 copy of each input. ``analytic`` overrides the gradients
    obtained from ``f().backward()``, e.g. ones computed at 32-bit.
    """
    if analytic is None:
        for t in inputs:
            t.grad = None
            t.requires_grad = True
        f().backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    originals = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(np.float64)
    worst = 0.0
    try:
        for t, a in zip(inputs, analytic):
            num = np.zeros(t.shape, dtype=np.float64)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
            if scale == 0:
                continue
            worst = max(worst, float(np.abs(a - num).max() / scale))
    finally:
        for t, o in zip(inputs, originals):
            t.data = o
    return worst
