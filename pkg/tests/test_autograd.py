from __future__ import annotations

import numpy as np
import pytest
from _gradcheck import check_entries

from eqvl.errors import AutogradError, NonFiniteError
from eqvl.fields import divergence_array
from eqvl.nn import Tensor, no_grad
from eqvl.nn import autograd as ag

RNG = np.random.default_rng(0)


def _param(shape, scale=1.0, shift=0.0):
    return Tensor(RNG.normal(size=shape) * scale + shift, requires_grad=True)


def _gradcheck(build, *inputs, n=12):
    """``build(*inputs) -> scalar Tensor``; checks every input at ``n`` random entries."""
    out = build(*inputs)
    out.backward()
    for t in inputs:
        analytic = t.grad.copy()
        idx = RNG.choice(t.data.size, size=min(n, t.data.size), replace=False)
        err = check_entries(lambda: build(*inputs).item(), t, analytic, idx)
        assert err < 1e-4, err
        t.grad = None


# weighting by a fixed random tensor avoids symmetric cancellations in the sum
def _weighted(shape):
    w = RNG.normal(size=shape)
    return lambda t: ag.sum(ag.mul(t, w))


@pytest.mark.parametrize("op,shift", [
    (ag.tanh, 0.0), (ag.sigmoid, 0.0), (ag.softplus, 0.0), (ag.arctan, 0.0), (ag.square, 0.0),
    (ag.relu, 0.0), (ag.leaky_relu, 0.0), (ag.absolute, 0.0), (ag.sqrt, 3.0), (ag.neg, 0.0),
])
def test_unary_ops(op, shift):
    x = _param((3, 4), shift=shift)
    red = _weighted((3, 4))
    _gradcheck(lambda a: red(op(a)), x)


def test_log1mexp():
    x = Tensor(-np.abs(RNG.normal(size=(5,))) - 0.05, requires_grad=True)
    _gradcheck(lambda a: ag.sum(ag.log1mexp(a)), x)
    assert np.allclose(ag.log1mexp(Tensor([-0.1, -5.0])).data, np.log1p(-np.exp([-0.1, -5.0])))


def test_binary_ops_with_broadcast():
    a, b = _param((2, 3, 4)), _param((1, 3, 1))
    red = _weighted((2, 3, 4))
    _gradcheck(lambda x, y: red(ag.mul(x, y)), a, b)
    _gradcheck(lambda x, y: red(ag.add(x, y)), a, b)
    _gradcheck(lambda x, y: red(x - y), a, b)
    _gradcheck(lambda x: red(x / 3.0), a)


def test_reductions_reshape_concat():
    a, b = _param((2, 3, 4)), _param((2, 2, 4))
    _gradcheck(lambda x: ag.sum(ag.square(ag.mean(x, axis=(1, 2)))), a)
    _gradcheck(lambda x: ag.sum(ag.square(ag.sum(x, axis=1, keepdims=True))), a)
    red = _weighted((6, 4))
    _gradcheck(lambda x: red(ag.reshape(x, (6, 4))), a)
    red = _weighted((2, 5, 4))
    _gradcheck(lambda x, y: red(ag.concat([x, y], axis=1)), a, b)


def _naive_conv(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (1, 1, 3)])
def test_conv2d_matches_direct_loop(stride, pad, k):
    x, w, b = RNG.normal(size=(2, 3, 8, 8)), RNG.normal(size=(4, 3, k, k)), RNG.normal(size=4)
    out = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    assert np.allclose(out, _naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_identity_kernel():
    x = RNG.normal(size=(2, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    assert np.array_equal(ag.conv2d(Tensor(x), Tensor(w), None, 1, 1).data, x)


def test_conv_transpose_is_adjoint_of_conv():
    w = RNG.normal(size=(5, 3, 4, 4))  # conv: 3 -> 5 channels; transposed uses (Ci=5, Co=3)
    x = RNG.normal(size=(2, 3, 8, 8))
    y = RNG.normal(size=(2, 5, 4, 4))
    cx = ag.conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    ty = ag.conv_transpose2d(Tensor(y), Tensor(w), None, 2, 1).data
    assert ty.shape == x.shape
    assert np.sum(cx * y) == pytest.approx(np.sum(x * ty), rel=1e-12)


def test_conv_gradients():
    x, w, b = _param((2, 3, 8, 8)), _param((4, 3, 4, 4), 0.3), _param((4,))
    red = _weighted((2, 4, 4, 4))
    _gradcheck(lambda a, c, d: red(ag.conv2d(a, c, d, 2, 1)), x, w, b)
    xt, wt, bt = _param((2, 4, 4, 4)), _param((4, 3, 4, 4), 0.3), _param((3,))
    red = _weighted((2, 3, 8, 8))
    _gradcheck(lambda a, c, d: red(ag.conv_transpose2d(a, c, d, 2, 1)), xt, wt, bt)


def test_divergence_op_matches_fields_and_gradients():
    s = _param((2, 3, 6, 8))
    assert np.allclose(ag.divergence(s, 0.5).data, divergence_array(s.data, 0.5), atol=1e-14)
    red = _weighted((2, 2, 6, 8))
    _gradcheck(lambda a: red(ag.divergence(a, 0.5)), s)


def test_quadratic_and_tanh_examples():
    p = _param((7,))
    loss = ag.mul(ag.sum(ag.square(p)), 0.5)
    loss.backward()
    assert np.allclose(p.grad, p.data, rtol=0, atol=1e-15)
    z = Tensor(np.zeros(1), requires_grad=True)
    ag.sum(ag.tanh(z)).backward()
    assert z.grad[0] == 1.0


def test_backward_usage_errors():
    with pytest.raises(AutogradError):
        Tensor(np.ones(3), requires_grad=True).backward()
    p = _param((3,))
    with pytest.raises(AutogradError):
        ag.square(p).backward()


def test_no_grad_records_nothing():
    p = _param((3,))
    with no_grad():
        out = ag.sum(ag.square(p))
    with pytest.raises(AutogradError):
        out.backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_detection():
    with pytest.raises(NonFiniteError):
        ag.mul(Tensor([1e308]), 1e10)
    with pytest.raises(NonFiniteError):
        ag.sqrt(Tensor([-1.0]))
