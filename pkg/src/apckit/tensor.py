"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Raw tensors are contiguous row-major numpy arrays: float32 for training,
float64 when verifying gradients against finite differences. A DiffValue
pairs a value array with a lazily allocated gradient buffer and the
provenance (parent nodes plus a backward rule) needed to backpropagate.

Backward rules are closures returning one gradient array per recorded
parent. ``backward()`` walks the graph once in reverse topological order
and accumulates additively, so shared parameters and repeated backward
calls both behave like summed copies.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class _GradMode:
    enabled = True


class no_grad:
    """Context manager suppressing provenance recording (no graph is built)."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


def as_array(data, dtype=None) -> np.ndarray:
    """Coerce to a contiguous float array.

    Existing float32/float64 arrays keep their dtype (float64 is the
    verification mode); everything else becomes float32.
    """
    if dtype is None:
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = DEFAULT_DTYPE
    return np.ascontiguousarray(data, dtype=dtype)


class DiffValue:
    """A tensor participating in reverse-mode differentiation.

    ``value`` and ``grad`` always share a shape; ``grad`` is allocated on
    first accumulation and zeroed by :func:`zero_grad`.
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        self.value = as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffValue, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return self.value.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def swapaxes(self, ax1, ax2):
        return swapaxes(self, ax1, ax2)


def make_node(value: np.ndarray, parents: Sequence[DiffValue], backward: Callable) -> DiffValue:
    """Build a graph node from precomputed forward output.

    ``backward(out_grad)`` must return one gradient array (or None) per
    entry of ``parents``. Extension point for fused ops defined outside
    this module; provenance is dropped when grad recording is off or no
    parent is differentiable.
    """
    out = DiffValue.__new__(DiffValue)
    out.value = value
    out.grad = None
    if _GradMode.enabled and parents:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def constant(data, dtype=None) -> DiffValue:
    """A leaf that never records provenance (inputs, masks, targets)."""
    return DiffValue(data, dtype)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, DiffValue) else np.asarray(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _binary(a, b, fwd, bwd_a, bwd_b) -> DiffValue:
    av, bv = _value(a), _value(b)
    _check_broadcast(av, bv)
    out = fwd(av, bv)
    parents, slots = [], []
    if isinstance(a, DiffValue):
        parents.append(a)
        slots.append(("a", av.shape))
    if isinstance(b, DiffValue):
        parents.append(b)
        slots.append(("b", bv.shape))
    if not parents:
        return constant(out)

    def backward(g):
        grads = []
        for side, shape in slots:
            raw = bwd_a(g, av, bv) if side == "a" else bwd_b(g, av, bv)
            grads.append(_unbroadcast(raw, shape))
        return grads

    return make_node(out, parents, backward)


def add(a, b) -> DiffValue:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> DiffValue:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> DiffValue:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(a, fwd, bwd) -> DiffValue:
    av = _value(a)
    out = fwd(av)
    if not isinstance(a, DiffValue):
        return constant(out)
    return make_node(out, (a,), lambda g: (bwd(g, av, out),))


def neg(a) -> DiffValue:
    return _unary(a, np.negative, lambda g, x, y: -g)


def abs_(a) -> DiffValue:
    # subgradient at 0 is 0 per coordinate (np.sign convention)
    return _unary(a, np.abs, lambda g, x, y: g * np.sign(x))


def relu(a) -> DiffValue:
    return _unary(a, lambda x: np.maximum(x, 0),
                  lambda g, x, y: g * (x > 0))


def sigmoid(a) -> DiffValue:
    return _unary(a, expit, lambda g, x, y: g * y * (1.0 - y))


def tanh(a) -> DiffValue:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def gelu(a) -> DiffValue:
    """x * Phi(x) with the exact normal CDF (erf form, not tanh approximation)."""

    def fwd(x):
        return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g, x, y):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return _unary(a, fwd, bwd)


#: op-tag dispatch table for the pointwise family
ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
    "abs": abs_,
}


def elementwise(tag: str, *operands) -> DiffValue:
    """Apply a pointwise op by tag; binary tags take two operands."""
    if tag not in ELEMENTWISE:
        raise ValueError(f"unknown elementwise tag {tag!r}")
    return ELEMENTWISE[tag](*operands)


def matmul(a, b) -> DiffValue:
    """Matrix product. 2-D operands multiply plainly; leading axes batch
    with numpy semantics, and a 2-D operand is shared across the batch
    (its gradient sums over batch entries)."""
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} x {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul batch dims differ: {av.shape} x {bv.shape}") from None

    parents, slots = [], []
    if isinstance(a, DiffValue):
        parents.append(a)
        slots.append("a")
    if isinstance(b, DiffValue):
        parents.append(b)
        slots.append("b")
    if not parents:
        return constant(out)

    def backward(g):
        grads = []
        for side in slots:
            if side == "a":
                grads.append(_unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape))
            else:
                grads.append(_unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape))
        return grads

    return make_node(out, parents, backward)


def sum_(a, axis=None, keepdims=False) -> DiffValue:
    av = _value(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    if not isinstance(a, DiffValue):
        return constant(out)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        g_ = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_, av.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward)


def mean_(a, axis=None, keepdims=False) -> DiffValue:
    av = _value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis=-1) -> DiffValue:
    """Probability-normalize along ``axis`` with max-subtraction for stability."""
    av = _value(a)
    if not -av.ndim <= axis < av.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {av.shape}")
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not isinstance(a, DiffValue):
        return constant(out)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return make_node(out, (a,), backward)


def log_softmax(a, axis=-1) -> DiffValue:
    av = _value(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    if not isinstance(a, DiffValue):
        return constant(out)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffValue:
    """Zero-mean/unit-variance over the last axis, then affine."""
    xv, gv, bv = _value(x), _value(gain), _value(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = xhat * gv + bv

    parents, slots = [], []
    for obj, name in ((x, "x"), (gain, "gain"), (bias, "bias")):
        if isinstance(obj, DiffValue):
            parents.append(obj)
            slots.append(name)
    if not parents:
        return constant(out)

    def backward(g):
        grads = []
        lead = tuple(range(g.ndim - 1))
        for name in slots:
            if name == "x":
                dxhat = g * gv
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                grads.append(inv * (dxhat - m1 - xhat * m2))
            elif name == "gain":
                grads.append(_unbroadcast((g * xhat).sum(axis=lead) if lead else g * xhat, gv.shape))
            else:
                grads.append(_unbroadcast(g.sum(axis=lead) if lead else g, bv.shape))
        return grads

    return make_node(out, parents, backward)


def reshape(a: DiffValue, shape) -> DiffValue:
    av = _value(a)
    out = av.reshape(shape)
    if not isinstance(a, DiffValue):
        return constant(out)
    return make_node(out, (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a: DiffValue, ax1: int, ax2: int) -> DiffValue:
    av = _value(a)
    out = np.ascontiguousarray(av.swapaxes(ax1, ax2))
    if not isinstance(a, DiffValue):
        return constant(out)
    return make_node(out, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def concat(parts: Iterable, axis: int = 0) -> DiffValue:
    parts = list(parts)
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    diff = [(i, p) for i, p in enumerate(parts) if isinstance(p, DiffValue)]
    if not diff:
        return constant(out)
    offsets = np.cumsum([0] + [v.shape[axis] for v in values])

    def backward(g):
        grads = []
        for i, p in diff:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return make_node(out, [p for _, p in diff], backward)


def take(a, indices, axis: int = 0) -> DiffValue:
    """Gather rows (or entries along ``axis``); backward scatter-adds."""
    av = _value(a)
    idx = np.asarray(indices)
    out = np.take(av, idx, axis=axis)
    if not isinstance(a, DiffValue):
        return constant(out)

    def backward(g):
        grad = np.zeros_like(av)
        if axis == 0:
            np.add.at(grad, idx, g)
        else:
            moved = np.moveaxis(grad, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return make_node(out, (a,), backward)


def narrow(a, axis: int, start: int, length: int) -> DiffValue:
    """Contiguous slice along one axis."""
    av = _value(a)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(start, start + length)
    out = av[tuple(sl)]
    if not isinstance(a, DiffValue):
        return constant(out)

    def backward(g):
        grad = np.zeros_like(av)
        grad[tuple(sl)] = g
        return (grad,)

    return make_node(out, (a,), backward)


def pad_axis(a, axis: int, before: int, after: int) -> DiffValue:
    av = _value(a)
    widths = [(0, 0)] * av.ndim
    widths[axis] = (before, after)
    out = np.pad(av, widths)
    if not isinstance(a, DiffValue):
        return constant(out)

    def backward(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(before, before + av.shape[axis])
        return (g[tuple(sl)],)

    return make_node(out, (a,), backward)


def dropout(a: DiffValue, rate: float, rng: np.random.Generator) -> DiffValue:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    av = _value(a)
    keep = (rng.random(av.shape) >= rate).astype(av.dtype) / (1.0 - rate)
    return mul(a, keep)


def backward(root: DiffValue) -> None:
    """Backpropagate from a scalar root, accumulating into ``.grad``.

    Each reachable node is visited exactly once; contributions from this
    call add onto whatever ``.grad`` already holds.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")

    # iterative post-order toposort (graphs are deep: BPTT over hundreds of steps)
    order: list[DiffValue] = []
    visited: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            pid = id(parent)
            if pid in flowing:
                flowing[pid] = flowing[pid] + pg
            else:
                flowing[pid] = pg


def zero_grad(params: Iterable[DiffValue]) -> None:
    for p in params:
        p.grad = None
