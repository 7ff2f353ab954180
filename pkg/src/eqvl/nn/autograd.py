"""A small reverse-mode tape over numpy arrays.

Only the operations the generator, discriminator and losses need are provided.
Every op checks its forward value for NaN/Inf and raises
:class:`~eqvl.errors.NonFiniteError` naming the op, so a diverging session
stops at the first bad value instead of propagating garbage.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import AutogradError, NonFiniteError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev = ()
        self._backward = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if self._backward is None:
            raise AutogradError("backward() called on a tensor that was not produced by a recorded computation")
        if grad is None:
            if self.data.size != 1:
                raise AutogradError("backward() without an explicit gradient requires a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self:
                    node.grad = None  # interior grads are not kept

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}", where=op)
    out = Tensor(data)
    if grad_enabled():
        parents = tuple(p for p in parents if p.requires_grad)
        if parents:
            out.requires_grad = True
            out._prev = parents
            out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    return _result(a.data ** 2, (a,), lambda g: _accumulate(a, 2.0 * a.data * g), "square")


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: _accumulate(a, np.sign(a.data) * g), "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps an exactly-zero field trainable
        safe = np.where(out > 0, out, 1.0)
        _accumulate(a, np.where(out > 0, 0.5 * g / safe, 0.0))

    return _result(out, (a,), backward, "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * (1.0 - out ** 2)), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: _accumulate(a, g * mask), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: _accumulate(a, g * factor), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _logistic(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    out = np.logaddexp(0.0, a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * _logistic(a.data)), "softplus")


def arctan(a: Tensor) -> Tensor:
    return _result(np.arctan(a.data), (a,), lambda g: _accumulate(a, g / (1.0 + a.data ** 2)), "arctan")


def log1mexp(a: Tensor) -> Tensor:
    """log(1 - exp(a)) for a < 0."""
    x = a.data
    if np.any(x >= 0):
        raise NonFiniteError("log1mexp requires strictly negative input", where="log1mexp")
    out = np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))
    return _result(out, (a,), lambda g: _accumulate(a, g / -np.expm1(-x)), "log1mexp")


def _logistic(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- convolution


def _scatter_windows(cols: np.ndarray, out_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    """Adjoint of the strided window view: ``cols`` is (N, C, Ho, Wo, kh, kw)."""
    out = np.zeros(out_shape)
    ho, wo = cols.shape[2], cols.shape[3]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    return out


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    return x[:, :, p:-p, p:-p] if p else x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, NCHW input, weight ``(C_out, C_in, kh, kw)``, zero padding."""
    co, ci, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise AutogradError(f"conv2d expects {ci} input channels, got {x.shape[1]}")
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, Ci, kh, kw
            gx = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), xp.shape, kh, kw, stride)
            _accumulate(x, _crop(gx, padding))

    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight ``(C_in, C_out, kh, kw)``.

    Output size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    ci, co, kh, kw = weight.shape
    if x.shape[1] != ci:
        raise AutogradError(f"conv_transpose2d expects {ci} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    full = (n, co, (h - 1) * stride + kh, (w - 1) * stride + kw)
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # N, H, W, Co, kh, kw
    out = _crop(_scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), full, kh, kw, stride), padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        win = _windows(_pad(g, padding), kh, kw, stride)  # N, Co, H, W, kh, kw
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, Ci
            _accumulate(x, gx.transpose(0, 3, 1, 2))

    return _result(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


# ---------------------------------------------------------------- physics


def _cdiff(f: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * spacing)


def divergence(stress: Tensor, spacing: float = 1.0) -> Tensor:
    """Periodic central-difference divergence, ``(N, 3, H, W)`` -> ``(N, 2, H, W)``.

    Channels are (s11, s22, s12); x1 runs along the last axis.
    """
    s = stress.data
    k1 = _cdiff(s[:, 0], -1, spacing) + _cdiff(s[:, 2], -2, spacing)
    k2 = _cdiff(s[:, 2], -1, spacing) + _cdiff(s[:, 1], -2, spacing)

    def backward(g):
        # the central difference is antisymmetric, so its adjoint is its negative
        g1, g2 = g[:, 0], g[:, 1]
        gs = np.empty_like(s)
        gs[:, 0] = -_cdiff(g1, -1, spacing)
        gs[:, 1] = -_cdiff(g2, -2, spacing)
        gs[:, 2] = -_cdiff(g1, -2, spacing) - _cdiff(g2, -1, spacing)
        _accumulate(stress, gs)

    return _result(np.stack([k1, k2], axis=1), (stress,), backward, "divergence")
