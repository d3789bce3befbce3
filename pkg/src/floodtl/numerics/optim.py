"""Adaptive-moment optimizer and gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from ..errors import NumericsError
from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.7
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter update counts: groups unfrozen late start their bias correction fresh
    counts: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
              lr: Union[float, Mapping[str, float]]) -> None:
    """Bias-corrected Adam update, in place, for every name in ``grads``.

    ``lr`` is a scalar or a per-parameter mapping. Parameters absent from
    ``grads`` (frozen) are left untouched, moments included.
    """
    for name in grads:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.counts[name] = 0
        m, v = state.m[name], state.v[name]
        state.counts[name] += 1
        k = state.counts[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step_lr = lr[name] if isinstance(lr, Mapping) else lr
        mhat = m / (1 - b1 ** k)
        vhat = v / (1 - b2 ** k)
        if state.weight_decay:
            p *= 1 - step_lr * state.weight_decay
        p -= (step_lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if not np.isfinite(total):
        raise NumericsError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total
