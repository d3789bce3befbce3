"""Hot inner kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``FLOODTL_NUMBA`` is not
``0``. ``use_backend`` switches at runtime (tests and benchmarks compare
the two). Both paths accept float32 and float64 arrays and return arrays of
the input dtype.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


# --- numpy path -------------------------------------------------------------

def _gate_activations(gates, H):
    """Sigmoid on all four gate blocks in one vectorized pass; the cell block
    is pre-scaled by 2 so that 2*sigmoid(2x) - 1 = tanh(x) can be recovered."""
    z = gates.copy()
    z[:, 2 * H:3 * H] *= 2
    np.negative(z, out=z)
    with np.errstate(over="ignore"):
        np.exp(z, out=z)
    z += 1
    np.reciprocal(z, out=z)
    return z


def lstm_pointwise_np(gates, c_prev):
    """gates: [B, 4H] pre-activations ordered (input, forget, cell, output)."""
    H = c_prev.shape[1]
    act = _gate_activations(gates, H)
    g = act[:, 2 * H:3 * H]
    g *= 2
    g -= 1
    c = act[:, H:2 * H] * c_prev
    c += act[:, :H] * g
    tanh_c = np.tanh(c)
    h = act[:, 3 * H:] * tanh_c
    return h, c, act, tanh_c


def lstm_pointwise_backward_np(dh, dc, act, c_prev, tanh_c):
    H = c_prev.shape[1]
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dgates = np.empty_like(act)
    dgates[:, :H] = dc_total * g * i * (1.0 - i)
    dgates[:, H:2 * H] = dc_total * c_prev * f * (1.0 - f)
    dgates[:, 2 * H:3 * H] = dc_total * i * (1.0 - g * g)
    dgates[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
    return dgates, dc_total * f


def scatter_add_rows_np(out, ids, src):
    np.add.at(out, ids, src)


def masked_max_np(x, start):
    """Max over time of x[b, start[b]:, :]; returns (values, argmax time index)."""
    B, L, _ = x.shape
    masked = np.where(np.arange(L)[None, :, None] >= start[:, None, None], x, -np.inf)
    idx = masked.argmax(axis=1)
    return np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :], idx


# --- numba path -------------------------------------------------------------

if HAVE_NUMBA:
    # Scalar exp/tanh inside numba loops do not vectorize (no SVML), so the
    # transcendental part stays in numpy and numba fuses the gate arithmetic.
    @numba.njit(cache=True)
    def _combine_gates(act, c_prev):
        B, H = c_prev.shape
        c = np.empty_like(c_prev)
        for b in range(B):
            for j in range(H):
                g = 2 * act[b, 2 * H + j] - 1
                act[b, 2 * H + j] = g
                c[b, j] = act[b, H + j] * c_prev[b, j] + act[b, j] * g
        return c

    def lstm_pointwise_nb(gates, c_prev):
        act = _gate_activations(gates, c_prev.shape[1])
        c = _combine_gates(act, c_prev)
        tanh_c = np.tanh(c)
        return act[:, 3 * c_prev.shape[1]:] * tanh_c, c, act, tanh_c

    @numba.njit(cache=True)
    def lstm_pointwise_backward_nb(dh, dc, act, c_prev, tanh_c):
        B, H = c_prev.shape
        dgates = np.empty_like(act)
        dc_prev = np.empty_like(c_prev)
        for b in range(B):
            for j in range(H):
                i = act[b, j]
                f = act[b, H + j]
                g = act[b, 2 * H + j]
                o = act[b, 3 * H + j]
                tc = tanh_c[b, j]
                d = dc[b, j] + dh[b, j] * o * (1.0 - tc * tc)
                dgates[b, j] = d * g * i * (1.0 - i)
                dgates[b, H + j] = d * c_prev[b, j] * f * (1.0 - f)
                dgates[b, 2 * H + j] = d * i * (1.0 - g * g)
                dgates[b, 3 * H + j] = dh[b, j] * tc * o * (1.0 - o)
                dc_prev[b, j] = d * f
        return dgates, dc_prev

    @numba.njit(cache=True)
    def scatter_add_rows_nb(out, ids, src):
        D = out.shape[1]
        for n in range(ids.shape[0]):
            r = ids[n]
            for d in range(D):
                out[r, d] += src[n, d]

    @numba.njit(cache=True)
    def masked_max_nb(x, start):
        B, L, H = x.shape
        vals = np.empty((B, H), dtype=x.dtype)
        idx = np.empty((B, H), dtype=np.int64)
        for b in range(B):
            s = start[b]
            for j in range(H):
                best = x[b, s, j]
                arg = s
                for t in range(s + 1, L):
                    if x[b, t, j] > best:
                        best = x[b, t, j]
                        arg = t
                vals[b, j] = best
                idx[b, j] = arg
        return vals, idx


# --- dispatch ---------------------------------------------------------------

_BACKEND = "numpy"


def use_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global _BACKEND, lstm_pointwise, lstm_pointwise_backward, scatter_add_rows, masked_max
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    suffix = "nb" if name == "numba" else "np"
    g = globals()
    lstm_pointwise = g[f"lstm_pointwise_{suffix}"]
    lstm_pointwise_backward = g[f"lstm_pointwise_backward_{suffix}"]
    scatter_add_rows = g[f"scatter_add_rows_{suffix}"]
    masked_max = g[f"masked_max_{suffix}"]
    _BACKEND = name


def backend() -> str:
    return _BACKEND


use_backend("numba" if HAVE_NUMBA and os.environ.get("FLOODTL_NUMBA", "1") != "0" else "numpy")
