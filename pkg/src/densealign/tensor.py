"""Minimal dense-tensor math with reverse-mode automatic differentiation.

Everything is float64 and numpy-backed. A dynamic tape is rebuilt on every
forward pass: each Tensor records its parents and a backward closure, and
``backward()`` walks the graph in reverse topological order, accumulating
gradients additively across fan-out.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "ParameterError",
    "tensor",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "l2_normalize",
    "stack",
    "take",
    "take_pairs",
    "clamp",
    "assert_finite",
]

LN_EPS = 1e-5
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised when an op receives an out-of-domain parameter (e.g. tau <= 0)."""


class Tensor:
    """A node in the dynamic computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is populated (same shape)
    by ``backward()`` for tensors with ``requires_grad``. Tensors are
    immutable once created except for grad accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad tensor.

        The loss must be scalar. Each node's backward rule runs exactly once,
        in reverse topological (insertion) order.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack_ = [(self, False)]
        while stack_:
            node, processed = stack_.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack_.append((p, False))
        self._accumulate(np.ones(()))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def neg(a):
    out = Tensor(-a.data, _parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(-g)

    out._backward = bw
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def matmul(a, b):
    """Matrix product with stacked (batched) leading dims.

    Backward rules: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul requires >=2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b))

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = bw
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    out._backward = bw
    return out


def swapaxes(a, ax1, ax2):
    out = Tensor(np.swapaxes(a.data, ax1, ax2), _parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    out._backward = bw
    return out


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = bw
    return out


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def take(a, indices, axis=0):
    """Gather along ``axis``; duplicate indices accumulate gradient additively."""
    indices = np.asarray(indices)
    out = Tensor(np.take(a.data, indices, axis=axis), _parents=(a,))

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            moved = np.moveaxis(acc, axis, 0)
            if indices.ndim == 0:
                np.add.at(moved, indices[()], g)
            else:
                gm = np.moveaxis(
                    g,
                    tuple(range(axis, axis + indices.ndim)),
                    tuple(range(indices.ndim)),
                )
                np.add.at(moved, indices, gm)
            a._accumulate(acc)

    out._backward = bw
    return out


def take_pairs(a, rows, cols):
    """Select ``a[rows[i], cols[i], :]`` for a 3-D tensor; returns len(rows) x d."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = Tensor(a.data[rows, cols], _parents=(a,))

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, cols), g)
            a._accumulate(acc)

    out._backward = bw
    return out


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors))

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    out._backward = bw
    return out


def softmax(x, axis=-1, temperature=1.0):
    """Stable softmax along ``axis`` with positive temperature."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, _parents=(x,))

    def bw(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate(p * (g - dot) / temperature)

    out._backward = bw
    return out


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise ShapeError(
            f"layer_norm last axis {x.data.shape} vs gain {gain.data.shape} / bias {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data, _parents=(x, gain, bias))

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * inv)

    out._backward = bw
    return out


def gelu(x):
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 0.7071067811865476
    inv_sqrt2pi = 0.3989422804014327
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = Tensor(x.data * cdf, _parents=(x,))

    def bw(g):
        if x.requires_grad:
            pdf = inv_sqrt2pi * np.exp(-0.5 * x.data * x.data)
            x._accumulate(g * (cdf + x.data * pdf))

    out._backward = bw
    return out


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(b), labels]
    out = Tensor(np.mean(lse - picked), _parents=(logits,))

    def bw(g):
        if logits.requires_grad:
            p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            p[np.arange(b), labels] -= 1.0
            logits._accumulate(g * p / b)

    out._backward = bw
    return out


def l2_normalize(x, axis=-1, eps=NORM_EPS):
    """Unit L2 norm along ``axis``; zero vectors map to zero (eps guard)."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    d = np.maximum(n, eps)
    y = x.data / d
    out = Tensor(y, _parents=(x,))

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            gx = (g - y * dot) / d
            # zero vectors carry no useful direction; freeze their gradient
            gx = np.where(n > eps, gx, 0.0)
            x._accumulate(gx)

    out._backward = bw
    return out


def clamp(x, lo=None, hi=None):
    """Clamp values; gradient passes only where unclamped."""
    out_data = np.clip(x.data, lo, hi)
    out = Tensor(out_data, _parents=(x,))

    def bw(g):
        if x.requires_grad:
            mask = np.ones_like(x.data)
            if lo is not None:
                mask = mask * (x.data >= lo)
            if hi is not None:
                mask = mask * (x.data <= hi)
            x._accumulate(g * mask)

    out._backward = bw
    return out


def assert_finite(t, name="tensor"):
    """Raise if ``t`` holds NaN or Inf; training steps call this to fail loudly."""
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite values detected in {name}")
    return t
