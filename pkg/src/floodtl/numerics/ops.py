"""Differentiable operations used by the language model and classifier."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ShapeError
from . import kernels
from .tensor import Tensor, as_tensor, make_outputs


def _need(t: Tensor) -> bool:
    return t.requires_grad


def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x W + b for x [N, I], W [I, O], b [O]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: cannot multiply {x.shape} by {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output width {W.shape[1]}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data
    inputs = [x, W] if b is None else [x, W, b]

    def backward(g):
        if _need(x):
            x.accumulate(g @ W.data.T)
        if _need(W):
            W.accumulate(x.data.T @ g)
        if b is not None and _need(b):
            b.accumulate(g.sum(axis=0))

    return make_outputs([y], inputs, backward, "affine")[0]


def transpose(W: Tensor) -> Tensor:
    if W.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {W.shape}")

    def backward(g):
        W.accumulate(g.T)

    return make_outputs([W.data.T], [W], backward, "transpose")[0]


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None

    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return make_outputs([y], [x], backward, "reshape")[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        if _need(a):
            a.accumulate(g)
        if _need(b):
            b.accumulate(g)

    return make_outputs([a.data + b.data], [a, b], backward, "add")[0]


def mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant (e.g. a dropout mask) broadcast into x."""
    mask = np.asarray(mask, dtype=x.dtype)
    try:
        if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"mul: mask shape {mask.shape} does not broadcast into {x.shape}") from None

    def backward(g):
        x.accumulate(g * mask)

    return make_outputs([x.data * mask], [x], backward, "mul")[0]


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        x.accumulate(g * pos)

    # maximum propagates NaN, so a bad input is caught rather than zeroed
    return make_outputs([np.maximum(x.data, 0).astype(x.dtype)], [x], backward, "relu")[0]


def embedding_lookup(ids, E: Tensor) -> Tensor:
    """Rows of E gathered at integer ``ids`` (any shape); output shape ids.shape + (D,)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = E.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids.max()) if ids.max() >= V else int(ids.min())
        raise IndexError(f"embedding id {bad} outside [0, {V})")
    flat = ids.reshape(-1)

    def backward(g):
        dE = np.zeros_like(E.data)
        kernels.scatter_add_rows(dE, flat, np.ascontiguousarray(g.reshape(flat.size, -1)))
        E.accumulate(dE)

    return make_outputs([E.data[ids]], [E], backward, "embedding_lookup")[0]


def _check_lstm_shapes(x_dim, h, c, W_ih, W_hh, b):
    H = h.shape[-1]
    if (W_ih.shape != (x_dim, 4 * H) or W_hh.shape != (H, 4 * H) or b.shape != (4 * H,)
            or c.shape != h.shape):
        raise ShapeError(
            f"lstm: incompatible shapes x_dim={x_dim} h={h.shape} c={c.shape} "
            f"W_ih={W_ih.shape} W_hh={W_hh.shape} b={b.shape}")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W_ih: Tensor, W_hh: Tensor, b: Tensor):
    """One LSTM step. Gate blocks in W are ordered (input, forget, cell, output)."""
    if x.data.ndim != 2 or h.data.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeError(f"lstm_cell: x {x.shape} and h {h.shape} must be [B, D] and [B, H]")
    _check_lstm_shapes(x.shape[1], h, c, W_ih, W_hh, b)
    gates = x.data @ W_ih.data + h.data @ W_hh.data + b.data
    h2, c2, act, tanh_c = kernels.lstm_pointwise(gates, c.data)

    def backward(dh, dc):
        dg, dc_prev = kernels.lstm_pointwise_backward(dh, dc, act, c.data, tanh_c)
        if _need(x):
            x.accumulate(dg @ W_ih.data.T)
        if _need(h):
            h.accumulate(dg @ W_hh.data.T)
        if _need(c):
            c.accumulate(dc_prev)
        if _need(W_ih):
            W_ih.accumulate(x.data.T @ dg)
        if _need(W_hh):
            W_hh.accumulate(h.data.T @ dg)
        if _need(b):
            b.accumulate(dg.sum(axis=0))

    h_out, c_out = make_outputs([h2, c2], [x, h, c, W_ih, W_hh, b], backward, "lstm_cell")
    return h_out, c_out


def lstm_layer(x: Tensor, h0: Tensor, c0: Tensor, W_ih: Tensor, W_hh: Tensor, b: Tensor,
               start=None):
    """Run an LSTM over x [B, L, D]; returns (outputs [B, L, H], h_L, c_L).

    Backward is full backpropagation through the L steps of this call.
    ``start`` (optional, [B]) marks left padding: before step start[b] row b's
    state is held at zero, so a padded row computes exactly what the unpadded
    sequence would from a zero state.
    """
    h0, c0 = as_tensor(h0), as_tensor(c0)
    if x.data.ndim != 3 or h0.data.ndim != 2 or x.shape[0] != h0.shape[0]:
        raise ShapeError(f"lstm_layer: x {x.shape} and h0 {h0.shape} must be [B, L, D] and [B, H]")
    _check_lstm_shapes(x.shape[2], h0, c0, W_ih, W_hh, b)
    B, L, D = x.shape
    H = h0.shape[1]
    dt = x.dtype
    xproj = (x.data.reshape(B * L, D) @ W_ih.data + b.data).reshape(B, L, 4 * H)
    Whh = W_hh.data
    out = np.empty((B, L, H), dtype=dt)
    cs = np.empty((L + 1, B, H), dtype=dt)
    acts = np.empty((L, B, 4 * H), dtype=dt)
    tanhs = np.empty((L, B, H), dtype=dt)
    masks = None
    if start is not None:
        start = np.asarray(start, dtype=np.int64)
        if start.shape != (B,) or (start < 0).any() or (start > L).any():
            raise ShapeError(f"lstm_layer: start must be {B} values in [0, {L}]")
        masks = (np.arange(L)[:, None, None] >= start[None, :, None]).astype(dt)
    h = h0.data
    cs[0] = c0.data
    for t in range(L):
        gates = xproj[:, t] + h @ Whh
        h, c, acts[t], tanhs[t] = kernels.lstm_pointwise(np.ascontiguousarray(gates), cs[t])
        if masks is not None:
            h = h * masks[t]
            c = c * masks[t]
        cs[t + 1] = c
        out[:, t] = h
    hT, cT = h, cs[L]

    def backward(dout, dhT, dcT):
        dgs = np.empty((B, L, 4 * H), dtype=dt)
        dh = dhT.copy()
        dc = dcT.copy()
        for t in range(L - 1, -1, -1):
            dh = dh + dout[:, t]
            if masks is not None:
                dh = dh * masks[t]
                dc = dc * masks[t]
            dg, dc = kernels.lstm_pointwise_backward(dh, dc, acts[t], cs[t], tanhs[t])
            dgs[:, t] = dg
            dh = dg @ Whh.T
        flat = dgs.reshape(B * L, 4 * H)
        if _need(x):
            x.accumulate((flat @ W_ih.data.T).reshape(B, L, D))
        if _need(W_ih):
            W_ih.accumulate(x.data.reshape(B * L, D).T @ flat)
        if _need(b):
            b.accumulate(flat.sum(axis=0))
        if _need(W_hh):
            hprev = np.concatenate([h0.data[:, None, :], out[:, :-1]], axis=1).reshape(B * L, H)
            W_hh.accumulate(hprev.T @ flat)
        if _need(h0):
            h0.accumulate(dh)
        if _need(c0):
            c0.accumulate(dc)

    return tuple(make_outputs([out, hT, cT], [x, h0, c0, W_ih, W_hh, b], backward, "lstm_layer"))


def softmax_cross_entropy(logits: Tensor, targets):
    """Mean cross-entropy of integer targets; returns (loss Tensor, probs ndarray)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    N, C = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target class outside [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    probs = ez / se
    rows = np.arange(N)
    logp = z[rows, targets] - np.log(se[:, 0])
    loss = np.asarray(-logp.mean(), dtype=logits.dtype)

    def backward(g):
        d = probs.copy()
        d[rows, targets] -= 1
        logits.accumulate(d * (g / N))

    return make_outputs([loss], [logits], backward, "softmax_cross_entropy")[0], probs


def concat_pool(x: Tensor, lengths) -> Tensor:
    """[last ⊕ max ⊕ mean] over time for left-padded sequences x [B, L, H].

    Only the last ``lengths[b]`` positions of row b are real tokens.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    B, L, H = x.shape
    if lengths.shape != (B,) or (lengths < 1).any() or (lengths > L).any():
        raise ShapeError(f"concat_pool: lengths must be {B} values in [1, {L}]")
    start = L - lengths
    valid = (np.arange(L)[None, :] >= start[:, None]).astype(x.dtype)
    last = x.data[:, -1, :]
    mx, arg = kernels.masked_max(np.ascontiguousarray(x.data), start)
    mean = (x.data * valid[:, :, None]).sum(axis=1) / lengths[:, None].astype(x.dtype)
    y = np.concatenate([last, mx, mean], axis=1)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, -1, :] += g[:, :H]
        np.add.at(dx, (np.arange(B)[:, None], arg, np.arange(H)[None, :]), g[:, H:2 * H])
        dx += valid[:, :, None] * (g[:, 2 * H:] / lengths[:, None].astype(x.dtype))[:, None, :]
        x.accumulate(dx)

    return make_outputs([y], [x], backward, "concat_pool")[0]
