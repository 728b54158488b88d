"""A small dense-array autodiff engine on top of numpy.

Every op below records a backward closure when at least one input requires a
gradient.  ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates cotangents into ``.grad``.  All data is
float32.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import NumericalFailure, ShapeMismatch

DTYPE = np.float32
LN_EPS = 1e-6

_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily run every op in ``dtype`` (used by the finite-difference oracle)."""
    global DTYPE
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def finite_checks(enabled=True):
    """Raise NumericalFailure as soon as any op produces a non-finite value."""
    global _check_finite
    prev, _check_finite = _check_finite, enabled
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self.grad = np.asarray(grad, dtype=DTYPE)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for p, g in zip(node._parents, pgrads):
                if g is None or not p.requires_grad:
                    continue
                g = np.asarray(g, dtype=DTYPE)
                p.grad = g if p.grad is None else p.grad + g
            if node._parents:
                # interior cotangents are not needed once propagated
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise NumericalFailure(f"non-finite value produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def scale(a, c):
    a = as_tensor(a)
    c = DTYPE(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    c = DTYPE(math.sqrt(2.0 / math.pi))
    u = c * (x + DTYPE(0.044715) * (x * x * x))
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        du = c * (1.0 + DTYPE(3 * 0.044715) * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), back, "gelu")


def silu(a):
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))

    def back(g):
        return (g * sig * (1.0 + x * (1.0 - sig)),)

    return _make(x * sig, (a,), back, "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims {a.shape} @ {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back, "matmul")


def linear(x, w, b=None):
    """x @ w (+ b), with w stored as (in, out).  Leading dims of x are folded."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (y.shape[-1],))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {src} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        idx = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            res.append(g[tuple(idx)])
        return tuple(res)

    return _make(out, tuple(tensors), back, "concat")


def narrow(a, axis, start, stop):
    """Slice ``a[start:stop]`` along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), back, "narrow")


def split(a, sizes, axis=0):
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeMismatch(f"split sizes {sizes} do not sum to {a.shape[axis]}")
    out, lo = [], 0
    for n in sizes:
        out.append(narrow(a, axis, lo, lo + n))
        lo += n
    return out


def select(a, axis, indices):
    """Gather entries along ``axis`` (e.g. a subset of frames)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def back(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), back, "select")


def assign(a, axis, indices, values):
    """Copy of ``a`` with the entries at ``indices`` along ``axis`` replaced."""
    a, values = as_tensor(a), as_tensor(values)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    key = (slice(None),) * axis + (indices,)
    out = a.data.copy()
    try:
        out[key] = values.data
    except ValueError:
        raise ShapeMismatch(f"assign: {values.shape} into {a.shape} at {axis}") from None

    def back(g):
        ga = g.copy()
        ga[key] = 0.0
        return ga, _unbroadcast(g[key], values.shape)

    return _make(out, (a, values), back, "assign")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- normalisation / attention pieces

def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), back, "softmax")


def log_softmax(a):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def layer_norm(a, eps=LN_EPS):
    """Normalise the last axis to zero mean / unit (biased) variance, no affine."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * rstd

    def back(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    return _make(xhat, (a,), back, "layer_norm")


def rotate_pairs(a, cos, sin):
    """Rotate adjacent feature pairs (x[2i], x[2i+1]) by per-pair angles.

    ``cos``/``sin`` broadcast against ``a.shape[:-1] + (a.shape[-1] // 2,)``.
    """
    a = as_tensor(a)
    cos = np.asarray(cos, dtype=DTYPE)
    sin = np.asarray(sin, dtype=DTYPE)

    def rot(x, s):
        x = x.reshape(x.shape[:-1] + (-1, 2))
        x0, x1 = x[..., 0], x[..., 1]
        y = np.stack([x0 * cos - x1 * s, x0 * s + x1 * cos], axis=-1)
        return y.reshape(y.shape[:-2] + (-1,))

    out = rot(a.data, sin)
    return _make(out, (a,), lambda g: (rot(g, -sin),), "rotate_pairs")


def attention(q, k, v, bias=None):
    """Scaled dot-product attention over the second-to-last axis.

    q: (..., Nq, dh), k/v: (..., Nk, dh); ``bias`` is a constant additive
    score mask broadcastable to (..., Nq, Nk).
    """
    dh = q.shape[-1]
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = add(scores, Tensor(bias))
    return matmul(softmax(scores), v)


# ---------------------------------------------------------------- checking

def grad_check(f, x, eps=1e-3):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` is the point (Tensor or
    array).  Error per element is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    The reverse-mode pass runs in float32; the finite differences are taken
    in float64 so the oracle is not limited by float32 rounding of ``f``.
    """
    base = np.array(as_tensor(x).data, dtype=np.float32)
    xt = Tensor(base.copy(), requires_grad=True)
    f(xt).backward()
    g_ad = np.zeros(base.size) if xt.grad is None else xt.grad.astype(np.float64).reshape(-1)

    point = base.astype(np.float64)
    flat = point.reshape(-1)
    g_fd = np.empty(flat.size, dtype=np.float64)
    with no_grad(), precision(np.float64):
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(Tensor(point)).data)
            flat[i] = old - eps
            fm = float(f(Tensor(point)).data)
            flat[i] = old
            g_fd[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
