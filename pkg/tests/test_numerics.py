"""Tape engine: forward values against independent oracles, gradients
against central differences, and the bookkeeping contracts (dtype rules,
stale-tape detection, RNG discipline)."""

import numpy as np
import pytest

import oracles
from helpers import gradcheck, weighted_sum
from resppain import numerics as nm


# ---------------------------------------------------------------------------
# forward values

def test_matmul_matches_triple_loop_exactly():
    # float64 accumulation rounded once must agree bit-for-bit
    # with the literal triple loop on small shapes.
    for seed in range(25):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-2, 2, (5, 7)).astype(np.float32)
        b = rng.uniform(-2, 2, (7, 3)).astype(np.float32)
        got = nm.matmul(nm.constant(a), nm.constant(b)).data
        want = oracles.matmul_triple_loop(a, b)
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, want)


def test_matmul_vector_forms():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(4, 6)).astype(np.float32)
    v = rng.normal(size=4).astype(np.float32)
    u = rng.normal(size=6).astype(np.float32)
    got_vm = nm.matmul(nm.constant(v), nm.constant(m)).data
    got_mv = nm.matmul(nm.constant(m), nm.constant(u)).data
    np.testing.assert_array_equal(
        got_vm, oracles.matmul_triple_loop(v[None, :], m)[0])
    np.testing.assert_array_equal(
        got_mv, oracles.matmul_triple_loop(m, u[:, None])[:, 0])


def test_matmul_rejects_bad_shapes():
    a = nm.constant(np.zeros((2, 3)))
    b = nm.constant(np.zeros((4, 2)))
    with pytest.raises(nm.ShapeError):
        nm.matmul(a, b)
    with pytest.raises(nm.ShapeError):
        nm.matmul(a, nm.constant(np.zeros((2, 2, 2))))


def test_mixed_dtypes_rejected():
    a = nm.constant(np.zeros(3), dtype=np.float32)
    b = nm.constant(np.zeros(3), dtype=np.float64)
    with pytest.raises(nm.ShapeError):
        nm.add(a, b)


def test_softmax_rows_sum_to_one_at_large_magnitude():
    # stability contract: magnitudes up to 1e4 keep row sums at 1.
    rng = np.random.default_rng(0)
    for mag in (1.0, 1e2, 1e4):
        x = (rng.normal(size=(6, 9)) * mag).astype(np.float32)
        p = nm.softmax_rows(nm.constant(x)).data
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_rows_matches_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5)).astype(np.float32)
    got = nm.softmax_rows(nm.constant(x)).data
    np.testing.assert_allclose(got, oracles.softmax_rows_f64(x), atol=1e-7)
    v = rng.normal(size=5).astype(np.float32)
    got1 = nm.softmax_rows(nm.constant(v)).data
    assert got1.shape == (5,)
    np.testing.assert_allclose(got1, oracles.softmax_rows_f64(v)[0], atol=1e-7)


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 7)).astype(np.float64)
    lp = nm.log_softmax(nm.constant(x, dtype=np.float64)).data
    p = nm.softmax_rows(nm.constant(x, dtype=np.float64)).data
    np.testing.assert_allclose(np.exp(lp), p, atol=1e-12)


def test_layer_norm_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    g = rng.normal(size=8).astype(np.float32)
    b = rng.normal(size=8).astype(np.float32)
    got = nm.layer_norm(nm.constant(x), nm.constant(g), nm.constant(b)).data
    want = oracles.layer_norm_f64(x, g, b)
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_gelu_matches_oracle():
    x = np.linspace(-4, 4, 33).astype(np.float64)
    got = nm.gelu(nm.constant(x, dtype=np.float64)).data
    np.testing.assert_allclose(got, oracles.gelu_f64(x), atol=1e-14)
    # gelu(0) = 0 and gelu approaches identity for large x
    assert got[16] == 0.0
    np.testing.assert_allclose(got[-1], 4.0, atol=2e-4)


def test_sigmoid_stable_and_correct():
    x = np.array([-1e4, -5.0, 0.0, 5.0, 1e4], dtype=np.float64)
    s = nm.sigmoid(nm.constant(x, dtype=np.float64)).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s[2], 0.5, atol=1e-15)
    np.testing.assert_allclose(s, 1.0 / (1.0 + np.exp(np.clip(-x, -700, 700))), atol=1e-12)


def test_add_bias_broadcast_and_shape_rules():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = nm.add(nm.constant(m), nm.constant(b)).data
    np.testing.assert_allclose(got, m + b, atol=1e-7)
    with pytest.raises(nm.ShapeError):
        nm.add(nm.constant(m), nm.constant(np.zeros(3, dtype=np.float32)))


def test_shape_plumbing_forward():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(nm.transpose(nm.constant(a)).data, a.T)
    v1 = nm.constant(np.array([1.0, 2.0], dtype=np.float32))
    v2 = nm.constant(np.array([3.0], dtype=np.float32))
    np.testing.assert_array_equal(nm.concat_vec([v1, v2]).data,
                                  np.array([1, 2, 3], dtype=np.float32))
    rows = [nm.constant(np.array([1.0, 2.0], dtype=np.float32)),
            nm.constant(np.array([3.0, 4.0], dtype=np.float32))]
    np.testing.assert_array_equal(nm.stack_rows(rows).data,
                                  np.array([[1, 2], [3, 4]], dtype=np.float32))
    np.testing.assert_allclose(nm.mean_axis0(nm.constant(a)).data, a.mean(axis=0), atol=1e-7)
    np.testing.assert_allclose(float(nm.sum_all(nm.constant(a)).data), a.sum(dtype=np.float64),
                               atol=1e-6)
    assert nm.sum_all(nm.constant(a)).shape == ()


# ---------------------------------------------------------------------------
# gradients (float64 parameters, central differences)

TOL = 1e-6


def test_grad_matmul():
    err = gradcheck(lambda p: weighted_sum(nm.matmul(p[0], p[1])),
                    [(4, 5), (5, 3)], seed=10)
    assert err < TOL


def test_grad_matmul_vector_forms():
    err = gradcheck(lambda p: weighted_sum(nm.matmul(p[0], p[1])), [(5,), (5, 3)], seed=11)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.matmul(p[0], p[1])), [(4, 5), (5,)], seed=12)
    assert err < TOL


def test_grad_add_bias_and_elementwise():
    err = gradcheck(lambda p: weighted_sum(nm.add(p[0], p[1])), [(4, 3), (3,)], seed=13)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.mul(p[0], p[1])), [(4, 3), (4, 3)], seed=14)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.sub(nm.scale(p[0], 1.7), p[1])),
                    [(2, 5), (2, 5)], seed=15)
    assert err < TOL


def test_grad_nonlinearities():
    err = gradcheck(lambda p: weighted_sum(nm.gelu(p[0])), [(4, 4)], seed=16)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.sigmoid(p[0])), [(7,)], seed=17)
    assert err < TOL


def test_grad_softmax_and_log_softmax():
    err = gradcheck(lambda p: weighted_sum(nm.softmax_rows(p[0])), [(3, 6)], seed=18)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.softmax_rows(p[0])), [(6,)], seed=19)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.log_softmax(p[0])), [(3, 6)], seed=20)
    assert err < TOL


def test_grad_layer_norm_all_inputs():
    err = gradcheck(lambda p: weighted_sum(nm.layer_norm(p[0], p[1], p[2])),
                    [(4, 6), (6,), (6,)], seed=21)
    assert err < 1e-5


def test_grad_shape_plumbing():
    err = gradcheck(lambda p: weighted_sum(nm.transpose(p[0])), [(3, 5)], seed=22)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.concat_vec([p[0], p[1]])), [(4,), (3,)], seed=23)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.stack_rows([p[0], p[1]])), [(4,), (4,)], seed=24)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.mean_axis0(p[0])), [(5, 3)], seed=25)
    assert err < TOL
    err = gradcheck(lambda p: nm.sum_all(p[0]), [(4, 4)], seed=26)
    assert err < TOL
    err = gradcheck(lambda p: weighted_sum(nm.add_const(p[0], 2.5)), [(3, 3)], seed=27)
    assert err < TOL


def test_grad_dropout_fixed_mask():
    # Fresh generator with the same seed on every call keeps the mask
    # fixed, so finite differences see a deterministic function.
    def build(p):
        rng = np.random.default_rng(99)
        return weighted_sum(nm.dropout(p[0], 0.4, training=True, rng=rng))

    err = gradcheck(build, [(8, 8)], seed=28)
    assert err < TOL


def test_grad_straight_through_is_identity():
    rng = np.random.default_rng(29)
    soft = nm.parameter(rng.normal(size=5), dtype=np.float64)
    hard = np.zeros(5)
    hard[2] = 1.0
    out = nm.straight_through(soft, hard)
    np.testing.assert_array_equal(out.data, hard)
    c = rng.normal(size=5)
    grads = nm.backward(nm.sum_all(nm.mul(out, nm.constant(c, dtype=np.float64))))
    np.testing.assert_allclose(grads[soft], c, atol=1e-12)


def test_grad_accumulates_over_reused_leaf():
    # One leaf feeding two branches gets the sum of both branch gradients.
    x = nm.parameter(np.array([1.0, 2.0]), dtype=np.float64)
    loss = nm.sum_all(nm.add(nm.scale(x, 2.0), nm.scale(x, 3.0)))
    grads = nm.backward(loss)
    np.testing.assert_allclose(grads[x], [5.0, 5.0], atol=1e-12)


# ---------------------------------------------------------------------------
# stochastic op statistics

def test_dropout_statistics():
    rng = np.random.default_rng(123)
    x = nm.constant(np.ones(100_000, dtype=np.float32))
    y = nm.dropout(x, 0.3, training=True, rng=rng).data
    zero_frac = float((y == 0).mean())
    assert abs(zero_frac - 0.3) < 0.01
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.7, atol=1e-6)
    np.testing.assert_allclose(y.mean(), 1.0, atol=0.01)


def test_dropout_eval_is_identity_and_consumes_no_rng():
    rng = np.random.default_rng(7)
    before = rng.bit_generator.state["state"]["state"]
    x = nm.constant(np.arange(10, dtype=np.float32))
    y = nm.dropout(x, 0.5, training=False, rng=rng)
    assert y is x
    assert rng.bit_generator.state["state"]["state"] == before
    with pytest.raises(ValueError):
        nm.dropout(x, 0.5, training=True, rng=None)


# ---------------------------------------------------------------------------
# tape bookkeeping

def test_backward_requires_scalar():
    x = nm.parameter(np.ones(3))
    with pytest.raises(nm.ShapeError):
        nm.backward(nm.scale(x, 2.0))


def test_double_backward_raises_tape_error():
    x = nm.parameter(np.ones(3), dtype=np.float64)
    loss = nm.sum_all(nm.mul(x, x))
    nm.backward(loss)
    with pytest.raises(nm.TapeError):
        nm.backward(loss)


def test_consumed_intermediate_reuse_raises():
    x = nm.parameter(np.ones(3), dtype=np.float64)
    mid = nm.mul(x, x)
    nm.backward(nm.sum_all(mid))
    stale = nm.sum_all(mid)   # builds on a node whose closure is gone
    with pytest.raises(nm.TapeError):
        nm.backward(stale)


def test_no_grad_blocks_recording():
    x = nm.parameter(np.ones(3), dtype=np.float64)
    with nm.no_grad():
        loss = nm.sum_all(nm.mul(x, x))
    assert not loss.requires_grad
    with pytest.raises(nm.TapeError):
        nm.backward(loss)


def test_leaf_grad_accumulation_and_zero():
    x = nm.parameter(np.array([1.0, 1.0]), dtype=np.float64)
    nm.backward(nm.sum_all(nm.scale(x, 2.0)))
    nm.backward(nm.sum_all(nm.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad, [5.0, 5.0], atol=1e-12)
    nm.zero_grads([x])
    assert x.grad is None


def test_tensor_data_is_immutable():
    x = nm.parameter(np.ones(3))
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_default_dtype_is_float32():
    assert nm.parameter([1.0, 2.0]).data.dtype == np.float32
    assert nm.parameter([1.0], dtype=np.float64).data.dtype == np.float64
