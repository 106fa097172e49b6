"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: `Tensor` wraps an ndarray, operations record
their inputs and a backward closure, and `Tensor.backward()` walks the
tape in reverse topological order. Dtype is preserved end to end, so the
same graph code runs in float32 for training and float64 for the
finite-difference gradient checker.

Only the operations needed by the network are provided; every backward
rule is covered by the finite-difference suite in the training module.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An ndarray plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)


def _coerce(x, ref: Tensor | None = None) -> Tensor:
    """Wrap a constant; scalars adopt the float dtype of `ref` so python
    floats never promote a float32 graph to float64."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if (
        ref is not None
        and ref.data.dtype.kind == "f"
        and arr.dtype != ref.data.dtype
        and arr.dtype.kind in "fiu"
    ):
        arr = arr.astype(ref.data.dtype)
    return Tensor(arr)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _coerce(b, a)
    else:
        a = _coerce(a, b if isinstance(b, Tensor) else None)
        b = _coerce(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _coerce(b, a)
    else:
        a = _coerce(a, b if isinstance(b, Tensor) else None)
        b = _coerce(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def bwd(g):
        _accum(a, g * (p * a.data ** (p - 1)))

    return _node(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data @ b.data

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    src = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(src))

    return _node(data, (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _node(data, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _node(data, tuple(parts), bwd)


def pad(a: Tensor, pad_width) -> Tensor:
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    data = np.pad(a.data, pad_width)
    inner = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.data.shape))

    def bwd(g):
        _accum(a, g[inner])

    return _node(data, (a,), bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (slices only, so rank is preserved)."""
    data = a.data[key]

    def bwd(g):
        z = np.zeros_like(a.data)
        z[key] += g
        _accum(a, z)

    return _node(data, (a,), bwd)


def roll(a: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    data = np.roll(a.data, shifts, axes)

    def bwd(g):
        _accum(a, np.roll(g, tuple(-s for s in shifts), axes))

    return _node(data, (a,), bwd)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Integer fancy indexing along the first axis; backward scatter-adds."""
    data = a.data[idx]

    def bwd(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        _accum(a, z)

    return _node(data, (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    axes = axis

    def bwd(g):
        if axes is not None and not keepdims:
            ax = axes if isinstance(axes, tuple) else (axes,)
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False))

    return _node(data, (a,), bwd)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype, copy=False)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, (g * (cdf + x * pdf)).astype(x.dtype, copy=False))

    return _node(data, (a,), bwd)


# When set to a list, every leaky_relu call appends its input sign pattern.
# The finite-difference checker uses this to detect probe brackets that
# cross the kink (where a central difference stops being a gradient oracle).
lrelu_sign_trace: list | None = None


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    x = a.data
    pos = x > 0
    if lrelu_sign_trace is not None:
        lrelu_sign_trace.append(np.packbits(pos.reshape(-1)))
    data = np.where(pos, x, alpha * x)

    def bwd(g):
        _accum(a, np.where(pos, g, alpha * g))

    return _node(data, (a,), bwd)


def tokens_linear(t: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[..., C_in] @ weight[C_out, C_in]^T (+ bias)."""
    y = matmul(t, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return y


def channels_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise linear map over the leading channel axis of [C_in, *spatial]."""
    c_in = x.shape[0]
    spatial = x.shape[1:]
    n = int(np.prod(spatial)) if spatial else 1
    y = matmul(weight, reshape(x, (c_in, n)))
    if bias is not None:
        y = add(y, reshape(bias, (weight.shape[0], 1)))
    return reshape(y, (weight.shape[0],) + tuple(spatial))


def normalize_axes(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Mean-0/var-1 over `axes`, then affine. gamma/beta must be broadcast-shaped."""
    mu = mean_(x, axis=axes, keepdims=True)
    xc = x - mu
    var = mean_(mul(xc, xc), axis=axes, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)
