from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mast import numerics as nx
from mast.errors import DimensionError, InputError, NonFiniteError
from mast.numerics import Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def check_grad(fn, *inputs, tol=1e-4):
    """Analytic gradient of sum(fn(*inputs) * w) vs central differences, every input."""
    rng = np.random.default_rng(0)
    out = fn(*inputs)
    w = rng.standard_normal(out.shape)
    for x in inputs:
        x.grad = None
    nx.total(nx.mul(out, Tensor(w))).backward()
    for x in inputs:
        def f(v, x=x):
            saved = x.data
            x.data = v
            with nx.no_grad():
                r = float((fn(*inputs).data * w).sum())
            x.data = saved
            return r

        num = nx.finite_diff_grad(f, x.data, eps=1e-5)
        err = nx.relative_error(x.grad, num, floor=1e-6).max()
        assert err < tol, (fn, err)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = nx.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[0.0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_zeros():
    out = nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).random((3, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_grads(rng):
    check_grad(nx.matmul, t64(rng.uniform(-1, 1, (3, 4))), t64(rng.uniform(-1, 1, (4, 2))))
    check_grad(nx.matmul, t64(rng.uniform(-1, 1, (2, 3, 4))), t64(rng.uniform(-1, 1, (4, 2))))
    check_grad(nx.matmul, t64(rng.uniform(-1, 1, (2, 2, 3, 4))), t64(rng.uniform(-1, 1, (2, 2, 4, 5))))


# --- softmax --------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, rtol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], rtol=1e-15)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        nx.softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_rows_and_shift(x, c):
    y = nx.softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(nx.softmax(Tensor(x + c)).data, y, atol=1e-6)


def test_softmax_grad(rng):
    check_grad(lambda x: nx.softmax(x, axis=-1), t64(rng.uniform(-1, 1, (3, 5))))
    check_grad(lambda x: nx.softmax(x, axis=0), t64(rng.uniform(-1, 1, (4, 2))))


# --- layer norm -----------------------------------------------------------


def test_layer_norm_constant_row():
    out = nx.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_zero_gain():
    b = np.array([1.0, -2, 3])
    out = nx.layer_norm(Tensor(np.random.default_rng(0).random((4, 3))), Tensor(np.zeros(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (4, 3)))


def test_layer_norm_hand_example():
    out = nx.layer_norm(Tensor([1.0, 2, 3]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    np.testing.assert_allclose(out.data, [-math.sqrt(1.5), 0, math.sqrt(1.5)], rtol=1e-14)


def test_layer_norm_empty():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 12)), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    x = x[x.std(axis=-1) > 1e-3]
    if x.size == 0:
        return
    d = x.shape[-1]
    y = nx.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=1e-12).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-6
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-3


def test_layer_norm_grad(rng):
    check_grad(nx.layer_norm, t64(rng.uniform(-1, 1, (3, 6))), t64(rng.uniform(0.5, 1.5, 6)), t64(rng.uniform(-1, 1, 6)))


# --- gelu -----------------------------------------------------------------


def test_gelu_values():
    out = nx.gelu(Tensor([0.0, 10.0, 1.0])).data
    assert out[0] == 0.0
    assert abs(out[1] - 10.0) < 1e-12
    assert abs(out[2] - 0.841345) < 1e-6
    # independent oracle: x * Phi(x) with Phi from math.erf
    for x in (-3.0, -0.5, 0.3, 2.0):
        assert abs(nx.gelu(Tensor([x])).data[0] - x * 0.5 * (1 + math.erf(x / math.sqrt(2)))) < 1e-14


def test_gelu_grad(rng):
    check_grad(nx.gelu, t64(rng.uniform(-3, 3, (4, 5))))


# --- conv2d ---------------------------------------------------------------


def test_conv2d_mast_patch_shape():
    x = Tensor(np.zeros((1, 128, 1024), dtype=np.float32))
    w = Tensor(np.zeros((96, 1, 7, 7), dtype=np.float32))
    assert nx.conv2d(x, w, Tensor(np.zeros(96, dtype=np.float32)), 4, 4, 3, 3).shape == (96, 32, 256)


def test_conv2d_ast_patch_shape():
    x = Tensor(np.zeros((1, 128, 1024), dtype=np.float32))
    w = Tensor(np.zeros((768, 1, 16, 16), dtype=np.float32))
    assert nx.conv2d(x, w, None, 10, 10, 0, 0).shape == (768, 12, 101)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_delta_identity(k, rng):
    x = rng.standard_normal((2, 3, 7, 9))
    w = np.zeros((3, 3, k, k))
    for c in range(3):
        w[c, c, k // 2, k // 2] = 1.0
    out = nx.conv2d(Tensor(x), Tensor(w), None, 1, 1, k // 2, k // 2)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    out = nx.conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1, 1, 0).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (7 - 2) // 1 + 1
    ref = np.zeros((1, 3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, j:j + 2] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        nx.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 7, 7))), None, 1, 1, 1, 1)


def test_conv2d_grad(rng):
    check_grad(
        lambda x, w, b: nx.conv2d(x, w, b, 2, 1, 1, 1),
        t64(rng.uniform(-1, 1, (2, 2, 5, 6))),
        t64(rng.uniform(-1, 1, (3, 2, 3, 3))),
        t64(rng.uniform(-1, 1, 3)),
    )


# --- remaining differentiable ops ----------------------------------------


def test_shape_op_grads(rng):
    a = t64(rng.uniform(-1, 1, (2, 3, 4)))
    check_grad(lambda x: nx.transpose(x, (2, 0, 1)), a)
    check_grad(lambda x: nx.reshape(x, (6, 4)), a)
    check_grad(lambda x: nx.getitem(x, (slice(None), 1)), a)
    check_grad(lambda x: nx.concat([x, x * 2.0], axis=1), a)
    check_grad(lambda x: nx.broadcast_to(nx.reshape(x[:, :1], (2, 1, 4)), (2, 5, 4)), a)
    check_grad(lambda x, y: nx.add(x, y), a, t64(rng.uniform(-1, 1, 4)))
    check_grad(lambda x, y: nx.mul(x, y), a, t64(rng.uniform(-1, 1, (3, 4))))
    check_grad(lambda x: nx.pad_class_border(x), t64(rng.uniform(-1, 1, (2, 3, 4))))


def test_einsum_and_take_rows_grads(rng):
    q = t64(rng.uniform(-1, 1, (2, 3, 4, 5)))
    table = t64(rng.uniform(-1, 1, (7, 5)))
    idx = rng.integers(0, 7, (4, 4))
    check_grad(lambda q, r: nx.einsum("...ftc,tkc->...ftk", q, nx.take_rows(r, idx)), q, table)


def test_avg_pool_grid_grad(rng):
    check_grad(lambda x: nx.avg_pool_grid(x, 2, 2), t64(rng.uniform(-1, 1, (1, 5, 6, 3))))
    check_grad(lambda x: nx.avg_pool_grid(x, 1, 2), t64(rng.uniform(-1, 1, (2, 3, 8, 2))))


def test_losses():
    assert abs(float(nx.bce_with_logits(Tensor([0.0]), [1.0]).data) - math.log(2)) < 1e-15
    assert float(nx.bce_with_logits(Tensor([30.0]), [1.0]).data) < 1e-12
    assert np.isfinite(nx.bce_with_logits(Tensor([1e4, -1e4]), [0.0, 1.0]).data)
    assert abs(float(nx.bce_with_logits(Tensor([0.0, 0.0]), [1.0, 0.0]).data) - math.log(2)) < 1e-15
    assert abs(float(nx.cross_entropy(Tensor(np.zeros((1, 5))), [2]).data) - math.log(5)) < 1e-15
    assert float(nx.cross_entropy(Tensor([[10.0, -10.0]]), [0]).data) < 1e-8
    assert abs(float(nx.cross_entropy(Tensor([[0.0, math.log(3)]]), [0]).data) - math.log(4)) < 1e-15
    with pytest.raises(DimensionError):
        nx.bce_with_logits(Tensor([0.0, 1.0]), [1.0])
    with pytest.raises(InputError):
        nx.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_loss_grads(rng):
    check_grad(lambda z: nx.bce_with_logits(z, [[1, 0, 1], [0, 0, 1]]), t64(rng.uniform(-3, 3, (2, 3))))
    check_grad(lambda z: nx.cross_entropy(z, [2, 0]), t64(rng.uniform(-3, 3, (2, 3))))


# --- tape mechanics, oracle ----------------------------------------------


def test_non_finite_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        nx.mul(Tensor([1e308]), 1e10)


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0])
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_shared_subexpression_accumulates():
    x = t64([3.0])
    (x * x + x).sum().backward()
    assert x.grad[0] == 7.0


def test_negate_backward_flips_gradient():
    x = t64(np.arange(4.0).reshape(1, 4))
    g, b = t64(np.ones(4)), t64(np.zeros(4))
    nx.total(nx.mul(nx.layer_norm(x, g, b), Tensor(np.arange(4.0)))).backward()
    clean = x.grad.copy()
    x.grad = None
    with nx.negate_backward("layer_norm"):
        nx.total(nx.mul(nx.layer_norm(x, g, b), Tensor(np.arange(4.0)))).backward()
    np.testing.assert_allclose(x.grad, -clean)


def test_finite_diff_oracle():
    x = np.random.default_rng(0).random((3, 2))
    np.testing.assert_allclose(nx.finite_diff_grad(lambda v: v.sum(), x), 1.0, atol=1e-9)
    assert abs(nx.finite_diff_grad(lambda v: (v**2).sum(), np.array([3.0]), eps=1e-5)[0] - 6) < 1e-8
