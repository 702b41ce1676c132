"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ndarray together with the recipe that produced it.
``backward()`` replays the recorded operations in reverse construction
order and accumulates exact analytic gradients into every reachable
tensor's ``grad`` slot. The op set is intentionally small: matrix
multiplication, the elementwise kernels the reconstruction pipeline
needs, stable softmax, layer normalization, reductions, indexed
gather/scatter, and shape plumbing.

One graph is built per training step. Graphs must not be shared across
threads; construction order is the (deterministic) topological order
used by the backward pass.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeMismatch", "NonFinite",
    "constant", "parameter", "backward", "no_grad", "set_nonfinite_checks",
    "matmul", "exp", "log1p", "sqrt", "sigmoid", "gelu", "abs_nudged",
    "softmax", "layer_norm", "tsum", "tmean", "cumsum",
    "gather", "segment_sum", "concat", "stack", "reshape", "transpose",
    "swapaxes", "minimum", "maximum", "clip_passthrough",
]


class ShapeMismatch(ValueError):
    """Operands cannot be combined under the op's shape rules."""


class NonFinite(ArithmeticError):
    """An op produced NaN or infinity while finite checks were enabled."""


_order_counter = itertools.count()
_grad_enabled = [True]
_check_finite = [False]


def set_nonfinite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/inf detection (off by default; costs one scan per op)."""
    _check_finite[0] = bool(enabled)


@contextmanager
def no_grad():
    """Run forward computations without recording the graph."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    """Dense array with an optional gradient slot and creation record."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp", "_order")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._order = next(_order_counter)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.value, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(value, dtype=None) -> Tensor:
    v = np.asarray(value, dtype=dtype)
    return Tensor(v, requires_grad=False)


def parameter(value, dtype=None) -> Tensor:
    v = np.array(value, dtype=dtype, copy=True)
    return Tensor(v, requires_grad=True)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, dtype=dtype)


def _node(value, parents, vjp, op_name) -> Tensor:
    """Build a result tensor, recording the vjp only when a parent needs it."""
    if _check_finite[0] and not np.all(np.isfinite(value)):
        raise NonFinite(f"{op_name} produced a non-finite value")
    out = Tensor(value)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(out: Tensor, seed=None) -> None:
    """Accumulate gradients of ``out`` into every reachable tensor.

    ``seed`` defaults to ones (so a scalar loss seeds with 1.0). Gradient
    slots of all reachable tensors are reset at the start, so each call
    computes gradients of exactly one output.
    """
    if not out.requires_grad:
        raise ValueError("output does not require grad; nothing to differentiate")
    seed = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=out.value.dtype)
    if seed.shape != out.value.shape:
        raise ShapeMismatch(f"seed shape {seed.shape} != output shape {out.value.shape}")

    nodes = []
    seen = set()
    stack = [out]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)

    for t in nodes:
        t.grad = None
    out.grad = seed.copy()
    for t in nodes:
        if t._vjp is None or t.grad is None:
            continue
        t._vjp(t.grad)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    try:
        value = a.value + b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(value, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    try:
        value = a.value - b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(value, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    try:
        value = a.value * b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(value, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    try:
        value = a.value / b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(a, _unbroadcast(g / b.value, a.shape))
        _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return _node(value, (a, b), vjp, "div")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    try:
        value = a.value @ b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _node(value, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# elementwise kernels
# ---------------------------------------------------------------------------

def exp(x) -> Tensor:
    x = _wrap(x)
    value = np.exp(x.value)

    def vjp(g):
        _accumulate(x, g * value)

    return _node(value, (x,), vjp, "exp")


def log1p(x) -> Tensor:
    x = _wrap(x)
    value = np.log1p(x.value)

    def vjp(g):
        _accumulate(x, g / (1.0 + x.value))

    return _node(value, (x,), vjp, "log1p")


def sqrt(x) -> Tensor:
    x = _wrap(x)
    value = np.sqrt(x.value)

    def vjp(g):
        _accumulate(x, g / (2.0 * value))

    return _node(value, (x,), vjp, "sqrt")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # Stable in both tails.
    v = x.value
    value = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                     np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def vjp(g):
        _accumulate(x, g * value * (1.0 - value))

    return _node(value, (x,), vjp, "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    value = x.value * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT2PI
        _accumulate(x, g * (cdf + x.value * pdf))

    return _node(value, (x,), vjp, "gelu")


def abs_nudged(x) -> Tensor:
    """|x| whose gradient is sign(x), with the x=0 subgradient pinned to 0."""
    x = _wrap(x)
    value = np.abs(x.value)

    def vjp(g):
        _accumulate(x, g * np.sign(x.value))

    return _node(value, (x,), vjp, "abs_nudged")


def minimum(x, bound) -> Tensor:
    """Elementwise min with a constant bound; zero gradient on the clamped side."""
    x = _wrap(x)
    b = np.asarray(bound)
    value = np.minimum(x.value, b)

    def vjp(g):
        _accumulate(x, g * (x.value < b))

    return _node(value, (x,), vjp, "minimum")


def maximum(x, bound) -> Tensor:
    x = _wrap(x)
    b = np.asarray(bound)
    value = np.maximum(x.value, b)

    def vjp(g):
        _accumulate(x, g * (x.value > b))

    return _node(value, (x,), vjp, "maximum")


def clip_passthrough(x, lo=0.0, hi=1.0) -> Tensor:
    """Clip values to [lo, hi] but pass the gradient straight through."""
    x = _wrap(x)
    value = np.clip(x.value, lo, hi)

    def vjp(g):
        _accumulate(x, g)

    return _node(value, (x,), vjp, "clip_passthrough")


# ---------------------------------------------------------------------------
# normalization and reductions
# ---------------------------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    x = _wrap(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * value, axis=axis, keepdims=True)
        _accumulate(x, value * (g - inner))

    return _node(value, (x,), vjp, "softmax")


def layer_norm(x, eps=1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    x = _wrap(x)
    mu = np.mean(x.value, axis=-1, keepdims=True)
    xc = x.value - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    value = xc * inv

    def vjp(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gy = np.mean(g * value, axis=-1, keepdims=True)
        _accumulate(x, inv * (g - gm - value * gy))

    return _node(value, (x,), vjp, "layer_norm")


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    value = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(value, (x,), vjp, "sum")


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    value = np.mean(x.value, axis=axis, keepdims=keepdims)
    count = x.value.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)

    return _node(value, (x,), vjp, "mean")


def cumsum(x, axis=0) -> Tensor:
    x = _wrap(x)
    value = np.cumsum(x.value, axis=axis)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accumulate(x, rev)

    return _node(value, (x,), vjp, "cumsum")


# ---------------------------------------------------------------------------
# indexing, scatter and shape plumbing
# ---------------------------------------------------------------------------

def gather(x, indices) -> Tensor:
    """Select rows along axis 0: result[k] = x[indices[k]] (indices may be n-D)."""
    x = _wrap(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatch("gather indices must be integers")
    value = x.value[idx]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _node(value, (x,), vjp, "gather")


def take(x, index) -> Tensor:
    """Basic/advanced numpy indexing with scatter-style backward."""
    x = _wrap(x)
    value = x.value[index]

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        _accumulate(x, gx)

    return _node(value, (x,), vjp, "take")


def segment_sum(x, segment_ids, num_segments) -> Tensor:
    """Sum rows of x into ``num_segments`` buckets along axis 0.

    Accumulation order follows the row order of x, so results are
    deterministic for a fixed input ordering.
    """
    x = _wrap(x)
    ids = np.asarray(segment_ids)
    if ids.shape != x.shape[:1]:
        raise ShapeMismatch(f"segment ids shape {ids.shape} != leading axis {x.shape[:1]}")
    value = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(value, ids, x.value)

    def vjp(g):
        _accumulate(x, g[ids])

    return _node(value, (x,), vjp, "segment_sum")


def concat(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _node(value, tuple(ts), vjp, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        value = np.stack([t.value for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        for k, t in enumerate(ts):
            _accumulate(t, np.take(g, k, axis=axis))

    return _node(value, tuple(ts), vjp, "stack")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        value = x.value.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(value, (x,), vjp, "reshape")


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    value = x.value.transpose(axes)
    inverse = np.argsort(axes)

    def vjp(g):
        _accumulate(x, g.transpose(inverse))

    return _node(value, (x,), vjp, "transpose")


def swapaxes(x, a, b) -> Tensor:
    x = _wrap(x)
    value = np.swapaxes(x.value, a, b)

    def vjp(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return _node(value, (x,), vjp, "swapaxes")
