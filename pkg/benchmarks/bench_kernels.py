"""Numba vs numpy kernels: per-kernel timings and one full LM training step.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes match the desk preset (batch 32, hidden 128, embedding 64, bptt 35).
"""
import argparse
import timeit

import numpy as np

from floodtl import lm
from floodtl.numerics import OptimizerState, RngStream, adam_step, clip_grad_norm, kernels

B, H, D, V, L = 32, 128, 64, 500, 35


def kernel_cases(rng):
    gates = rng.normal(size=(B, 4 * H)).astype(np.float32)
    c = rng.normal(size=(B, H)).astype(np.float32)
    h, c2, act, tanh_c = kernels.lstm_pointwise_np(gates, c)
    dh = rng.normal(size=(B, H)).astype(np.float32)
    ids = rng.integers(0, V, size=B * L)
    src = rng.normal(size=(B * L, D)).astype(np.float32)
    x = rng.normal(size=(B, 40, 3 * D)).astype(np.float32)
    start = rng.integers(0, 30, size=B)
    return {
        "lstm_pointwise": lambda: kernels.lstm_pointwise(gates, c),
        "lstm_pointwise_backward": lambda: kernels.lstm_pointwise_backward(dh, dh, act, c, tanh_c),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(np.zeros((V, D), np.float32), ids, src),
        "masked_max": lambda: kernels.masked_max(x, start),
    }


def train_step_case():
    cfg = lm.LMConfig(vocab_size=V, bptt_len=L, batch_size=B)
    model = lm.init_lm(cfg, seed=0)
    rng = RngStream(0, 1)
    ids = np.random.default_rng(0).integers(0, V, size=(B, L + 1))
    opt = OptimizerState()

    def step():
        loss, _ = lm.lm_loss(model, ids[:, :-1], ids[:, 1:], train=True, rng=rng)
        loss.backward()
        grads = {n: p.grad for n, p in model.params.items()}
        clip_grad_norm(grads, cfg.clip)
        adam_step(model.params, grads, opt, 1e-3)
        model.zero_grad()
    return step


def best_of(fn, repeat, number):
    fn()  # warm-up, includes jit compilation
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    results = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        for name, fn in kernel_cases(rng).items():
            results[(name, backend)] = best_of(fn, args.repeat, 200)
        results[("lm_train_step", backend)] = best_of(train_step_case(), args.repeat, 3)
    print(f"{'case':<26}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name in [k for k, b in results if b == "numpy"]:
        t_np, t_nb = results[(name, "numpy")], results[(name, "numba")]
        print(f"{name:<26}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
