import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from floodtl.errors import ConfigError, NumericsError, ShapeError
from floodtl.numerics import (OptimizerState, RngStream, Tensor, adam_step, add, affine,
                              clip_grad_norm, concat_pool, dropout_mask, embedding_lookup,
                              grad_check, kernels, lstm_cell, lstm_layer, mul, relu, reshape,
                              softmax_cross_entropy, transpose)
from floodtl.numerics import ops

from oracles import lstm_step, naive_matmul, softmax_ce

TOL64 = 1e-6
N_INSTANCES = 5


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=np.float64)


def scalarize(y, seed):
    """Random linear functional of y, so every output entry carries a distinct weight."""
    R = np.random.default_rng(seed).normal(size=(y.data.size, 1))
    return reshape(affine(reshape(y, (1, -1)), Tensor(R, dtype=np.float64)), ())


# Each case builds (closure, inputs) for one random instance.

def case_affine(rng, k):
    x, W, b = t64(rng, 3, 4), t64(rng, 4, 2), t64(rng, 2)
    return lambda: scalarize(affine(x, W, b), k), [x, W, b]


def case_affine_ce(rng, k):
    x, W, b = t64(rng, 3, 4), t64(rng, 4, 5), t64(rng, 5)
    y = rng.integers(0, 5, size=3)
    return lambda: softmax_cross_entropy(affine(x, W, b), y)[0], [x, W, b]


def case_embedding(rng, k):
    E = t64(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    ids[0, 0] = ids[1, 1]
    return lambda: scalarize(embedding_lookup(ids, E), k), [E]


def case_lstm_cell(rng, k):
    B, D, H = 2, 3, 4
    ins = [t64(rng, B, D), t64(rng, B, H), t64(rng, B, H),
           t64(rng, D, 4 * H, scale=0.5), t64(rng, H, 4 * H, scale=0.5), t64(rng, 4 * H, scale=0.5)]

    def f():
        h, c = lstm_cell(*ins)
        return add(scalarize(h, k), scalarize(c, k + 100))
    return f, ins


def case_lstm_layer(rng, k):
    B, L, D, H = 3, 5, 3, 4
    ins = [t64(rng, B, L, D), t64(rng, B, H), t64(rng, B, H),
           t64(rng, D, 4 * H, scale=0.5), t64(rng, H, 4 * H, scale=0.5), t64(rng, 4 * H, scale=0.5)]
    start = np.array([0, 2, 4]) if k % 2 else None

    def f():
        out, h, c = lstm_layer(*ins, start=start)
        return add(add(scalarize(out, k), scalarize(h, k + 1)), scalarize(c, k + 2))
    return f, ins


def case_ce(rng, k):
    z = t64(rng, 4, 5, scale=3.0)
    y = rng.integers(0, 5, size=4)
    return lambda: softmax_cross_entropy(z, y)[0], [z]


def case_concat_pool(rng, k):
    x = t64(rng, 3, 6, 4)
    lengths = np.array([6, 3, 1])
    return lambda: scalarize(concat_pool(x, lengths), k), [x]


def case_relu(rng, k):
    x = t64(rng, 4, 5)
    x.data[np.abs(x.data) < 1e-2] = 0.5  # keep away from the kink
    return lambda: scalarize(relu(x), k), [x]


def case_mul(rng, k):
    x = t64(rng, 2, 3, 4)
    m = dropout_mask("locked", 0.5, x.shape, RngStream(k), dtype=np.float64)
    return lambda: scalarize(mul(x, m), k), [x]


def case_transpose(rng, k):
    W = t64(rng, 3, 5)
    return lambda: scalarize(transpose(W), k), [W]


def case_add(rng, k):
    a, b = t64(rng, 2, 3), t64(rng, 2, 3)
    return lambda: scalarize(add(a, b), k), [a, b]


def case_reshape(rng, k):
    x = t64(rng, 2, 6)
    return lambda: scalarize(reshape(x, (3, 4)), k), [x]


GRAD_CASES = {f.__name__[5:]: f for f in [case_affine, case_affine_ce, case_embedding, case_lstm_cell,
                                          case_lstm_layer, case_ce, case_concat_pool, case_relu,
                                          case_mul, case_transpose, case_add, case_reshape]}


def gradient_suite_errors():
    """Worst 64-bit relative error per op over N_INSTANCES random instances."""
    worst = {}
    for name, make in GRAD_CASES.items():
        errs = []
        for k in range(N_INSTANCES):
            f, ins = make(np.random.default_rng(1000 + k), k)
            errs.append(grad_check(f, ins, eps=1e-6))
        worst[name] = max(errs)
    return worst


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check_64bit(backend, name):
    for k in range(N_INSTANCES):
        f, ins = GRAD_CASES[name](np.random.default_rng(k), k)
        assert grad_check(f, ins, eps=1e-6) < TOL64


def test_grad_check_32bit_embedding_and_lstm():
    rng = np.random.default_rng(7)
    for make in (case_embedding, case_lstm_cell):
        f, ins = make(rng, 0)
        for t in ins:
            t.data = t.data.astype(np.float32)
        for t in ins:
            t.grad = None
        f().backward()
        analytic = [t.grad.astype(np.float64) for t in ins]
        assert grad_check(f, ins, eps=1e-3, analytic=analytic) < 1e-3


def test_grad_check_detects_doubled_backward(monkeypatch):
    real = ops.relu

    def doubled(x):
        y = real(x)
        fn = y._node.backward_fn
        y._node.backward_fn = lambda g: fn(2 * g)
        return y

    rng = np.random.default_rng(0)
    x = t64(rng, 3, 4)
    x.data = np.abs(x.data) + 0.1
    err = grad_check(lambda: scalarize(doubled(x), 0), [x], eps=1e-6)
    assert err == pytest.approx(0.5, abs=1e-6)


# --- forward values against oracles ---------------------------------------------

def test_affine_examples():
    y = affine(Tensor([[1, 2]]), Tensor(np.zeros((2, 2))), Tensor([3, 4]))
    assert y.data.tolist() == [[3, 4]]
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    got = affine(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, naive_matmul(a.tolist(), b.tolist()), rtol=1e-12)
    with pytest.raises(ShapeError):
        affine(Tensor(a), Tensor(a))


def test_embedding_examples():
    E = Tensor([[1, 2], [3, 4]], requires_grad=True)
    assert embedding_lookup([[0]], E).data.tolist() == [[[1, 2]]]
    y = embedding_lookup([[1, 1]], E)
    y.backward(np.array([[[1.0, 2.0], [10.0, 20.0]]]))
    assert E.grad.tolist() == [[0, 0], [11, 22]]
    with pytest.raises(IndexError):
        embedding_lookup([[2]], E)


def test_lstm_cell_examples(backend):
    B, D, H = 2, 3, 4
    z = lambda *s: Tensor(np.zeros(s))
    h, c = lstm_cell(z(B, D), z(B, H), z(B, H), z(D, 4 * H), z(H, 4 * H), z(4 * H))
    assert not h.data.any() and not c.data.any()

    c0 = Tensor(np.full((B, H), 0.7))
    b = np.zeros(4 * H)
    b[H:2 * H] = 30.0
    b[:H] = -30.0
    _, c1 = lstm_cell(z(B, D), z(B, H), c0, z(D, 4 * H), z(H, 4 * H), Tensor(b))
    np.testing.assert_allclose(c1.data, 0.7, atol=1e-6)
    with pytest.raises(ShapeError):
        lstm_cell(z(B, D), z(B, H), z(B, H), z(D + 1, 4 * H), z(H, 4 * H), z(4 * H))


def test_lstm_layer_matches_textbook_steps(backend):
    rng = np.random.default_rng(3)
    B, L, D, H = 2, 6, 3, 5
    x = rng.normal(size=(B, L, D))
    W_ih, W_hh, b = rng.normal(size=(D, 4 * H)), rng.normal(size=(H, 4 * H)), rng.normal(size=4 * H)
    h = c = np.zeros((B, H))
    ref = []
    for t in range(L):
        h, c = lstm_step(x[:, t], h, c, W_ih, W_hh, b)
        ref.append(h)
    T = lambda a: Tensor(a, dtype=np.float64)
    out, hT, cT = lstm_layer(T(x), T(np.zeros((B, H))), T(np.zeros((B, H))), T(W_ih), T(W_hh), T(b))
    np.testing.assert_allclose(out.data, np.stack(ref, axis=1), atol=1e-12)
    np.testing.assert_allclose(cT.data, c, atol=1e-12)


def test_lstm_layer_left_padding_matches_unpadded(backend):
    rng = np.random.default_rng(4)
    D, H, n = 3, 4, 4
    W = [Tensor(rng.normal(size=s), dtype=np.float64) for s in [(D, 4 * H), (H, 4 * H), (4 * H,)]]
    seq = rng.normal(size=(1, n, D))
    padded = np.concatenate([rng.normal(size=(1, 3, D)), seq], axis=1)
    z = Tensor(np.zeros((1, H)), dtype=np.float64)
    a, _, _ = lstm_layer(Tensor(seq, dtype=np.float64), z, z, *W)
    b, _, _ = lstm_layer(Tensor(padded, dtype=np.float64), z, z, *W, start=np.array([3]))
    np.testing.assert_array_equal(b.data[:, 3:], a.data)
    assert not b.data[:, :3].any()


def test_softmax_examples():
    loss, probs = softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)
    loss, _ = softmax_cross_entropy(Tensor([[100.0, 0.0]]), [0])
    assert 0 <= loss.item() < 1e-6
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_softmax_matches_oracle():
    rng = np.random.default_rng(5)
    z = Tensor(rng.normal(size=(4, 5)) * 3, requires_grad=True, dtype=np.float64)
    y = rng.integers(0, 5, size=4)
    loss, _ = softmax_cross_entropy(z, y)
    loss.backward()
    ref_loss, ref_grad = softmax_ce(z.data, y)
    assert loss.item() == pytest.approx(ref_loss, abs=1e-12)
    np.testing.assert_allclose(z.grad, ref_grad, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, c, seed):
    z = np.random.default_rng(seed).uniform(-100, 100, size=(n, c)).astype(np.float32)
    _, probs = softmax_cross_entropy(Tensor(z), [0] * n)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_concat_pool_values(backend):
    x = np.arange(2 * 4 * 2, dtype=np.float64).reshape(2, 4, 2)
    x[1, 0] = 99.0  # padding, must not win the max
    y = concat_pool(Tensor(x), [4, 2]).data
    assert y[1].tolist() == [14, 15, 14, 15, 13, 14]
    assert y[0, 2:4].tolist() == [6, 7]


def test_non_finite_raises():
    with pytest.raises(NumericsError):
        affine(Tensor([[np.inf, 1.0]], dtype=np.float64), Tensor(np.ones((2, 1))))
    with pytest.raises(NumericsError):
        relu(Tensor([np.nan]))


# --- dropout and rng ------------------------------------------------------------

def test_dropout_p0_identity():
    assert (dropout_mask("standard", 0.0, (3, 4), RngStream(0)) == 1).all()


def test_dropout_half_statistics():
    m = dropout_mask("standard", 0.5, (100_000,), RngStream(1))
    kept = m[m != 0]
    assert abs(kept.size / m.size - 0.5) < 0.01
    assert (kept == 2.0).all()


def test_locked_mask_shared_over_time():
    m = dropout_mask("locked", 0.3, (4, 10, 6), RngStream(2))
    x = mul(Tensor(np.ones((4, 10, 6))), m).data
    np.testing.assert_array_equal(x[:, 0], x[:, 7])


def test_embedding_row_mask_drops_whole_rows():
    m = dropout_mask("embedding_row", 0.5, (50, 8), RngStream(3))
    assert m.shape == (50, 1) and set(np.unique(m)) <= {0.0, 2.0}


def test_dropout_errors():
    with pytest.raises(ConfigError):
        dropout_mask("standard", 1.0, (2,), RngStream(0))
    with pytest.raises(ConfigError):
        dropout_mask("gaussian", 0.1, (2,), RngStream(0))


def test_rng_stream_reproducible():
    a = dropout_mask("weight_drop", 0.4, (5, 5), RngStream(9, 3))
    b = dropout_mask("weight_drop", 0.4, (5, 5), RngStream(9, 3))
    c = dropout_mask("weight_drop", 0.4, (5, 5), RngStream(9, 4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# --- optimizer ------------------------------------------------------------------

def test_adam_first_step_moves_lr():
    p = {"w": Tensor([1.0], dtype=np.float64)}
    adam_step(p, {"w": np.array([1.0])}, OptimizerState(), 0.1)
    assert p["w"].data[0] - 1.0 == pytest.approx(-0.1, abs=1e-6)


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = {"w": Tensor([1.0, -2.0], dtype=np.float64)}
    st_ = OptimizerState()
    adam_step(p, {"w": np.array([0.5, 0.5])}, st_, 0.1)
    before, m_before = p["w"].data.copy(), st_.m["w"].copy()
    p["w"].data[:] = before
    st_.m["w"][:] = 0.0
    st_.v["w"][:] = 0.0
    adam_step(p, {"w": np.zeros(2)}, st_, 0.1)
    np.testing.assert_array_equal(p["w"].data, before)
    st2 = OptimizerState()
    adam_step({"w": Tensor([0.0])}, {"w": np.array([1.0])}, st2, 0.1)
    m1 = st2.m["w"].copy()
    adam_step({"w": Tensor([0.0])}, {"w": np.array([0.0])}, st2, 0.1)
    np.testing.assert_allclose(st2.m["w"], m1 * 0.7)
    assert m_before.any()


def test_adam_deterministic_and_nonfinite():
    def run():
        rng = np.random.default_rng(0)
        p = {"a": Tensor(rng.normal(size=(3, 3)))}
        s = OptimizerState()
        for _ in range(5):
            adam_step(p, {"a": rng.normal(size=(3, 3)).astype(np.float32)}, s, 0.01)
        return p["a"].data
    np.testing.assert_array_equal(run(), run())
    with pytest.raises(NumericsError, match="bad"):
        adam_step({"bad": Tensor([0.0])}, {"bad": np.array([np.nan])}, OptimizerState(), 0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(g["a"]) == pytest.approx(1.0, abs=1e-5)


# --- kernel parity --------------------------------------------------------------

@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_kernels_agree_across_backends(dtype):
    rng = np.random.default_rng(0)
    B, H, L, V, D = 4, 6, 7, 9, 5
    gates = rng.normal(size=(B, 4 * H)).astype(dtype)
    c = rng.normal(size=(B, H)).astype(dtype)
    a = kernels.lstm_pointwise_np(gates, c)
    b = kernels.lstm_pointwise_nb(gates, c)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-5 if dtype == np.float32 else 1e-12)
    dh = rng.normal(size=(B, H)).astype(dtype)
    for u, v in zip(kernels.lstm_pointwise_backward_np(dh, dh, a[2], c, a[3]),
                    kernels.lstm_pointwise_backward_nb(dh, dh, a[2], c, a[3])):
        np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-6)
    ids = rng.integers(0, V, size=20)
    src = rng.normal(size=(20, D)).astype(dtype)
    o1, o2 = np.zeros((V, D), dtype), np.zeros((V, D), dtype)
    kernels.scatter_add_rows_np(o1, ids, src)
    kernels.scatter_add_rows_nb(o2, ids, src)
    np.testing.assert_allclose(o1, o2, rtol=1e-6)
    x = rng.normal(size=(B, L, D)).astype(dtype)
    start = np.array([0, 3, 6, 2])
    for u, v in zip(kernels.masked_max_np(x, start), kernels.masked_max_nb(x, start)):
        np.testing.assert_array_equal(u, v)


def test_backend_switch_errors():
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")
