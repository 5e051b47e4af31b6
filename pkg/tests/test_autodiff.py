import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmoe import autodiff as ad
from rmoe import gradcheck
from rmoe.numkit import NonFiniteError


def test_sum_gradient_is_ones():
    g = ad.CompGraph(np.float64)
    x = g.param("x", np.arange(6.0).reshape(2, 3))
    ad.sum(x)
    np.testing.assert_array_equal(ad.backward(g)["x"], np.ones((2, 3)))


def test_linear_gradient_pattern():
    g = ad.CompGraph(np.float64)
    w = g.param("w", np.zeros((2, 2)))
    ad.sum(ad.matmul(g.const([[1.0, 2.0]]), w))
    np.testing.assert_array_equal(ad.backward(g)["w"], [[1, 1], [2, 2]])


def test_quadratic_numeric_gradient():
    g = ad.CompGraph(np.float64)
    ad.sum(ad.square(g.param("x", np.array([3.0]))))
    rep = ad.finite_diff_check(g, eps=1e-5, tol=1e-9)
    assert abs(rep.numeric["x"][0] - 6.0) < 1e-9
    assert rep.passed


def test_softmax_cross_entropy_toy():
    rng = np.random.default_rng(0)
    g = ad.CompGraph(np.float64)
    w = g.param("w", rng.standard_normal((4, 3)))
    x = g.const(rng.standard_normal((5, 4)))
    onehot = np.eye(3)[[0, 2, 1, 1, 0]]
    p = ad.softmax(ad.matmul(x, w), axis=-1)
    ad.scale(ad.sum(ad.mul(ad.log(p), onehot)), -1.0 / 5)
    rep = ad.finite_diff_check(g, eps=1e-5, tol=1e-6)
    assert rep.passed, rep.max_rel_err
    # independent closed form: dW = x^T (p - y) / n
    xv = x.value
    pv = np.exp(xv @ w.value)
    pv /= pv.sum(1, keepdims=True)
    np.testing.assert_allclose(rep.analytic["w"], xv.T @ (pv - onehot) / 5, rtol=1e-12)


def test_backward_errors():
    g = ad.CompGraph(np.float64)
    x = g.param("x", np.ones(3))
    ad.mul(x, 2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(g)
    ad.sum(x)
    g.set_param("x", np.zeros(3))
    with pytest.raises(ad.GraphError):
        ad.backward(g)
    g.replay()
    ad.backward(g)


def test_duplicate_param_and_foreign_node():
    g, h = ad.CompGraph(), ad.CompGraph()
    g.param("a", np.ones(2))
    with pytest.raises(ad.GraphError):
        g.param("a", np.ones(2))
    with pytest.raises(ad.GraphError):
        g.lift(h.const(np.ones(2)))


def test_constants_and_frozen_params_get_no_gradient():
    g = ad.CompGraph(np.float64)
    a = g.param("a", np.ones(2))
    b = g.param("b", np.ones(2), trainable=False)
    ad.sum(ad.mul(a, b))
    grads = ad.backward(g)
    assert set(grads) == {"a"}


def test_replay_recomputes_from_leaves():
    g = ad.CompGraph(np.float64)
    x = g.param("x", np.array([1.0, 2.0]))
    out = ad.sum(ad.square(x))
    assert out.value == 5.0
    g.set_param("x", np.array([3.0, 0.0]))
    g.replay()
    assert out.value == 9.0


def test_finite_diff_non_finite_raises():
    g = ad.CompGraph(np.float64)
    ad.sum(ad.log(g.param("x", np.array([1e-7]))))
    with pytest.raises(NonFiniteError):
        ad.finite_diff_check(g, eps=1e-5)


def test_gradient_accumulates_over_reuse():
    g = ad.CompGraph(np.float64)
    x = g.param("x", np.array([2.0]))
    ad.sum(x * x + x)
    np.testing.assert_allclose(ad.backward(g)["x"], [5.0])


def test_broadcast_gradient_reduced_to_operand_shape():
    g = ad.CompGraph(np.float64)
    b = g.param("b", np.zeros(3))
    ad.sum(ad.add(g.const(np.ones((4, 3))), b))
    np.testing.assert_array_equal(ad.backward(g)["b"], [4, 4, 4])


def test_rel_error_definitions():
    assert ad.rel_error(1.0, 1.0) == 0
    np.testing.assert_allclose(ad.rel_error([2.0], [1.0]), [0.5])
    np.testing.assert_allclose(ad.rel_error([0.0], [1e-12]), [1e-4])
    # per-parameter error is measured against the parameter's largest entry
    assert ad.param_rel_error(np.array([1.0, 1e-6]), np.array([1.0, 2e-6])) == pytest.approx(1e-6)


@pytest.mark.parametrize("name", sorted(gradcheck.KERNELS))
def test_every_kernel_gradient(name):
    for seed in (0, 1):
        for r in gradcheck.check_kernel(name, seed):
            assert r.passed, r


def _composite(dtype, n, d, h, seed):
    rng = np.random.default_rng(seed)
    g = ad.CompGraph(dtype)
    w1 = g.param("w1", rng.standard_normal((d, h)))
    w2 = g.param("w2", rng.standard_normal((h, 2)))
    gain = g.param("g", 1 + 0.1 * rng.standard_normal(d))
    x = g.const(rng.standard_normal((n, d)) * 2)
    hid = ad.gelu(ad.matmul(ad.layer_norm(x, gain, g.const(np.zeros(d))), w1))
    out = ad.softmax(ad.matmul(hid, w2), axis=-1)
    ad.sum(ad.mul(out, rng.standard_normal((n, 2))))
    return g


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_composite_gradient_property(n, d, h, seed):
    """Random GELU network with layer norm and softmax: float64 analytic vs extended-precision numeric."""
    g = _composite(np.float64, n, d, h, seed)
    rep = ad.finite_diff_check(g, eps=1e-5, tol=1e-6, numeric_graph=_composite(np.longdouble, n, d, h, seed))
    assert rep.passed, rep.rel_err
