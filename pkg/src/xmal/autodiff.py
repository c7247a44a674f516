"""Reverse-mode automatic differentiation on dense float64 arrays.

A thin tape: every operation eagerly computes its numpy value and records
how to push a gradient back to its parents. Node creation order is a
topological order of the graph, so the backward pass simply walks nodes in
reverse creation order, visiting each exactly once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

EPS = 1e-12

_node_ids = itertools.count()

# Multiplicative overrides applied to an op's outgoing gradient, keyed by op
# name. Empty in normal operation; the self-check suite plants a wrong factor
# here as a negative control to prove finite differences catch broken
# gradients.
GRAD_OVERRIDES: dict[str, float] = {}


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("value", "name", "requires_grad", "grad", "_id", "_op", "_parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str | None = None,
        _op: str = "leaf",
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._id = next(_node_ids)
        self._op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self._op}, shape={self.value.shape}{tag})"

    # -- arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def parameter(value, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (the inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad.reshape(shape)


# -- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out, _op="add", _parents=(a, b), _backward=backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value - b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return Tensor(out, _op="sub", _parents=(a, b), _backward=backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.value, _op="neg", _parents=(a,), _backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value * b.value

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(out, _op="mul", _parents=(a, b), _backward=backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Tensor(out, _op="div", _parents=(a, b), _backward=backward)


def matmul(a, b) -> Tensor:
    """Strict 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul needs (m,k) by (k,n); got {a.value.shape} by {b.value.shape}"
        )
    out = a.value @ b.value

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Tensor(out, _op="matmul", _parents=(a, b), _backward=backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.value.shape}")
    return Tensor(a.value.T, _op="transpose", _parents=(a,), _backward=lambda g: (g.T,))


def permute(a, axes: tuple) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor(np.transpose(a.value, axes), _op="permute", _parents=(a,), _backward=backward)


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    out = a.value.reshape(shape)
    orig = a.value.shape

    def backward(g):
        return (g.reshape(orig),)

    return Tensor(out, _op="reshape", _parents=(a,), _backward=backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _op="concat", _parents=tuple(parts), _backward=backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, _op="exp", _parents=(a,), _backward=lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), _op="log", _parents=(a,), _backward=lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, _op="sqrt", _parents=(a,), _backward=lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.value**p

    def backward(g):
        return (g * p * a.value ** (p - 1.0),)

    return Tensor(out, _op="power", _parents=(a,), _backward=backward)


def hinge(a) -> Tensor:
    """Elementwise max(x, 0). Subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    out = np.maximum(a.value, 0.0)

    def backward(g):
        return (g * (a.value > 0.0),)

    return Tensor(out, _op="hinge", _parents=(a,), _backward=backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is stable for large |x| in both directions
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, _op="sigmoid", _parents=(a,), _backward=backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)
    in_shape = a.value.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return Tensor(out, _op="sum", _parents=(a,), _backward=backward)


def _parse_einsum(pattern: str) -> tuple[str, str, str]:
    try:
        lhs, out = pattern.split("->")
        in1, in2 = lhs.split(",")
    except ValueError as e:
        raise ContractError(f"einsum pattern must be 'ab,bc->ac' style, got {pattern!r}") from e
    for subs in (in1, in2, out):
        if len(set(subs)) != len(subs):
            raise ContractError(f"repeated index within one operand: {pattern!r}")
    for idx in in1:
        if idx not in out and idx not in in2:
            raise ContractError(f"index {idx!r} of first operand unmatched in {pattern!r}")
    for idx in in2:
        if idx not in out and idx not in in1:
            raise ContractError(f"index {idx!r} of second operand unmatched in {pattern!r}")
    return in1, in2, out


def einsum(pattern: str, a, b) -> Tensor:
    """Two-operand einsum. Every input index must appear in the output or in
    the other operand, which makes the adjoint another einsum."""
    in1, in2, out_subs = _parse_einsum(pattern)
    a, b = as_tensor(a), as_tensor(b)
    out = np.einsum(pattern, a.value, b.value)

    def backward(g):
        ga = np.einsum(f"{out_subs},{in2}->{in1}", g, b.value)
        gb = np.einsum(f"{out_subs},{in1}->{in2}", g, a.value)
        return ga, gb

    return Tensor(out, _op="einsum", _parents=(a, b), _backward=backward)


# -- composed helpers -------------------------------------------------------


def guard_min(x, floor: float) -> Tensor:
    """max(x, floor) built from hinge, so the guard is differentiable."""
    return add(hinge(sub(x, floor)), floor)


def guarded_norm(x, axis=None, keepdims: bool = False, eps: float = EPS) -> Tensor:
    """max(||x||_2, eps) along `axis`. The floor is applied to the sum of
    squares before the root so the gradient stays finite at zero vectors."""
    sumsq = reduce_sum(mul(x, x), axis=axis, keepdims=keepdims)
    return sqrt(guard_min(sumsq, eps * eps))


def row_softmax(m, scale: float = 1.0) -> Tensor:
    """Softmax of scale*x along the last axis, with max subtraction.

    The subtracted max is treated as a constant; by shift invariance the
    gradient is unchanged.
    """
    if scale <= 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    m = as_tensor(m)
    y = mul(m, scale)
    shift = np.max(y.value, axis=-1, keepdims=True)
    e = exp(sub(y, shift))
    return div(e, reduce_sum(e, axis=-1, keepdims=True))


def l2_normalize(v, eps: float = EPS) -> Tensor:
    """v / max(||v||_2, eps) for a 1-D vector."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    v = as_tensor(v)
    if v.value.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got shape {v.value.shape}")
    return div(v, guarded_norm(v, eps=eps))


def normalize_rows(m, eps: float = EPS) -> Tensor:
    """Divide along the last axis by the guarded L2 norm. Works for any ndim."""
    m = as_tensor(m)
    return div(m, guarded_norm(m, axis=-1, keepdims=True, eps=eps))


# -- backward pass -----------------------------------------------------------


def gradients(loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar w.r.t. named parameters.

    Parameters not reached by the loss get exact-zero gradients. Also stores
    each gradient on the parameter's .grad.
    """
    if loss.value.size != 1:
        raise ContractError(f"gradient target must be scalar, got shape {loss.value.shape}")

    nodes: dict[int, Tensor] = {loss._id: loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and p._id not in nodes:
                nodes[p._id] = p
                stack.append(p)

    table: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.value)}
    for tid in sorted(nodes, reverse=True):  # reverse creation order
        t = nodes[tid]
        if t._backward is None:
            continue  # leaf: keep the accumulated gradient for readout
        g = table.pop(tid, None)
        if g is None:
            continue
        scale = GRAD_OVERRIDES.get(t._op)
        if scale is not None:
            g = g * scale
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            acc = table.get(p._id)
            table[p._id] = pg if acc is None else acc + pg

    result: dict[str, np.ndarray] = {}
    for p in params:
        g = table.get(p._id)
        if g is None:
            g = np.zeros_like(p.value)
        p.grad = g
        result[p.name or f"param{p._id}"] = g
    return result


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max discrepancy between reverse-mode and central-difference gradients.

    `fn` must rebuild and return the scalar loss from the current parameter
    values. Per entry the error is relative, falling back to absolute where
    the analytic gradient is below 1e-8. With `max_entries`, a seeded subset
    of entries per parameter is probed instead of the full sweep.
    """
    if not (0.0 < h <= 1e-2):
        raise ContractError(f"step h must be in (0, 1e-2], got {h}")
    analytic = gradients(fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        ana = analytic[p.name or f"param{p._id}"]
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().value)
            flat[i] = orig - h
            f_minus = float(fn().value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = ana.reshape(-1)[i]
            diff = abs(numeric - a)
            err = diff if abs(a) < 1e-8 else diff / abs(a)
            worst = max(worst, err)
    return worst
