"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` records the primitive that produced it together with a
vector-Jacobian product closure. :func:`grad` walks the recorded graph in
reverse topological order and accumulates adjoints. Every primitive checks
that its forward result is finite and raises :class:`PrimitiveDomainError`
naming itself otherwise.

Domain-specific fused primitives (the RTE march, the instrument-lineshape
operator, cross-section mixing) are built with :func:`primitive` in the
modules that own them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np


class PrimitiveDomainError(ArithmeticError):
    def __init__(self, primitive: str, detail: str):
        super().__init__(f"primitive '{primitive}': {detail}")
        self.primitive = primitive


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    def __len__(self):
        return len(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def primitive(name: str, value, parents: Sequence, vjp: Callable) -> Var:
    """Record a primitive result.

    ``vjp(g)`` must return one adjoint (or None) per parent, each shaped like
    that parent's value; broadcasting is undone automatically.
    """
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise PrimitiveDomainError(name, "non-finite result")
    parents = tuple(lift(p) for p in parents)
    if any(p.requires_grad for p in parents):
        return Var(value, True, parents, vjp, name)
    return Var(value, op=name)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def grad(output: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
    """Adjoints of a scalar (or seeded) ``output`` with respect to ``wrt``."""
    if seed is None:
        if output.size != 1:
            raise ValueError("grad of a non-scalar output needs an explicit seed")
        seed = np.ones_like(output.value)
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    adj = {id(output): np.asarray(seed, dtype=np.float64)}
    wanted = {id(v) for v in wrt}
    results = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if id(node) in wanted:
            results[id(node)] = g
        if node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=np.float64), p.shape)
            prev = adj.get(id(p))
            adj[id(p)] = pg if prev is None else prev + pg
    return [results.get(id(v), np.zeros(v.shape)) for v in wrt]


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = lift(a), lift(b)
    return primitive("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = lift(a), lift(b)
    return primitive("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return primitive("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise PrimitiveDomainError("div", "division by zero")
    out = av / bv
    return primitive("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    a = lift(a)
    return primitive("neg", -a.value, (a,), lambda g: (-g,))


def power(a, p: float):
    """a ** p for a constant real exponent."""
    a = lift(a)
    av = a.value
    if isinstance(p, Var):
        raise TypeError("power expects a constant exponent")
    if float(p) != int(p) and np.any(av < 0):
        raise PrimitiveDomainError("power", "negative base with non-integer exponent")
    if p < 0 and np.any(av == 0):
        raise PrimitiveDomainError("power", "zero base with negative exponent")
    out = av**p
    return primitive("power", out, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    a = lift(a)
    av = a.value
    return primitive("square", av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    a = lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return primitive("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = lift(a)
    if np.any(a.value <= 0):
        raise PrimitiveDomainError("log", "non-positive argument")
    av = a.value
    return primitive("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = lift(a)
    if np.any(a.value < 0):
        raise PrimitiveDomainError("sqrt", "negative argument")
    out = np.sqrt(a.value)
    return primitive("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def sigmoid_value(x):
    """Numerically stable logistic function on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return float(sigmoid_value(x[None])[0])
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = lift(a)
    out = sigmoid_value(np.atleast_1d(a.value)).reshape(a.shape)
    return primitive("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = lift(a)
    av = a.value
    e = np.exp(-np.abs(av))
    out = np.maximum(av, 0.0) + np.log1p(e)
    r = 1.0 / (1.0 + e)
    sig = np.where(av >= 0, r, e * r)
    return primitive("softplus", out, (a,), lambda g: (g * sig,))


def sin(a):
    a = lift(a)
    av = a.value
    return primitive("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    a = lift(a)
    av = a.value
    return primitive("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def absolute(a):
    """|a| with subgradient 0 at the kink."""
    a = lift(a)
    av = a.value
    return primitive("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


# -- reductions and structure -----------------------------------------------


def vsum(a, axis=None, keepdims=False):
    a = lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return primitive("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = lift(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return g[..., None] * bv, np.tensordot(av, g, axes=(list(range(av.ndim - 1)), list(range(g.ndim))))
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return primitive("matmul", av @ bv, (a, b), vjp)


def getitem(a, idx):
    a = lift(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return primitive("getitem", a.value[idx], (a,), vjp)


def take_rows(a, index):
    """a[index] along axis 0 for an integer index array (gather)."""
    a = lift(a)
    index = np.asarray(index, dtype=np.int64)
    n_rows = a.shape[0]

    def vjp(g):
        out = np.zeros((n_rows,) + g.shape[1:])
        np.add.at(out, index, g)
        return (out,)

    return primitive("take", a.value[index], (a,), vjp)


def reshape(a, shape):
    a = lift(a)
    old = a.shape
    return primitive("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    a = lift(a)
    return primitive("transpose", a.value.T, (a,), lambda g: (g.T,))


def concatenate(items, axis=-1):
    items = [lift(x) for x in items]
    sizes = [x.shape[axis] for x in items]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(items)))

    return primitive("concatenate", np.concatenate([x.value for x in items], axis=axis), items, vjp)


def linear_operator(a, matrix, name="linear"):
    """Apply a fixed matrix along the last axis: out = a @ matrix.T.

    The adjoint is the transposed application, registered as one primitive.
    """
    a = lift(a)
    M = np.asarray(matrix, dtype=np.float64)
    return primitive(name, a.value @ M.T, (a,), lambda g: (g @ M,))


# -- parameters and objectives ----------------------------------------------


@dataclass
class ParamVector:
    """Flat parameter vector with named, disjoint slices covering it."""

    values: np.ndarray
    layout: Mapping[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.layout:
            self.layout = {"all": slice(0, self.values.size)}
        covered = np.zeros(self.values.size, dtype=np.int64)
        for name, sl in self.layout.items():
            start, stop, step = sl.indices(self.values.size)
            if step != 1 or sl.stop is None or sl.stop > self.values.size:
                raise ValueError(f"bad layout slice for {name!r}: {sl}")
            covered[start:stop] += 1
        if not np.all(covered == 1):
            raise ValueError("layout slices must be disjoint and cover the vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def __len__(self):
        return self.values.size

    def block(self, name):
        return self.values[self.layout[name]]

    def slice_of(self, index: int) -> str:
        for name, sl in self.layout.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)

    def copy(self, values=None) -> "ParamVector":
        return ParamVector(np.array(self.values if values is None else values, dtype=np.float64), dict(self.layout))


class Differentiable(Protocol):
    def value_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]: ...


class TapeObjective:
    """Wrap ``fn(theta: Var) -> scalar Var`` as a :class:`Differentiable`."""

    def __init__(self, fn: Callable[[Var], Var]):
        self.fn = fn

    def value(self, values) -> float:
        return float(self.fn(Var(np.array(values, dtype=np.float64))).value)

    def value_and_grad(self, values):
        theta = Var(np.array(values, dtype=np.float64), requires_grad=True)
        out = self.fn(theta)
        if out.size != 1:
            raise ValueError("objective must be scalar")
        (g,) = grad(out, [theta])
        return float(out.value.reshape(())), g

    def __call__(self, values) -> float:
        return self.value(values)


def _as_objective(f):
    if hasattr(f, "value_and_grad"):
        return f
    return TapeObjective(f)


def _values(theta):
    return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


def evaluate_with_gradient(f, theta) -> tuple[float, np.ndarray]:
    """Value and full gradient of a scalar objective at ``theta`` (one reverse pass)."""
    return _as_objective(f).value_and_grad(_values(theta))


def _value_only(obj, values):
    if hasattr(obj, "value"):
        return obj.value(values)
    return obj.value_and_grad(values)[0]


def check_gradient(f, theta, coords, eps: float = 1e-4) -> float:
    """Worst relative error between reverse-mode and central-difference partials.

    The step for coordinate ``i`` is ``eps * max(|theta_i|, 1)``; relative
    errors use ``max(|ad|, |fd|, 1e-12)`` as denominator.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    obj = _as_objective(f)
    x = np.array(_values(theta), dtype=np.float64)
    _, g = obj.value_and_grad(x)
    worst = 0.0
    for i in np.atleast_1d(coords):
        h = eps * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (_value_only(obj, xp) - _value_only(obj, xm)) / (2.0 * h)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-12)
        worst = max(worst, err)
    return worst
