"""Small reverse-mode autodiff over dense float64 blocks.

Only what the value-mixing networks need: matrix products (batched or not),
elementwise arithmetic with numpy broadcasting, ELU/ReLU/abs/square, and
sum/mean/min/max reductions.  Each op returns a :class:`Node`; calling
:func:`backward` on a scalar node accumulates ``d root / d leaf`` into the
``grad`` of every leaf that requires gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents: tuple["Node", ...] = (), backward_fn: BackwardFn | None = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = np.zeros_like(self.value) if self.requires_grad and not parents else None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class ParamBlock:
    id: str
    node: Node


def param(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward_fn, op) -> Node:
    out = Node(value, parents, op=op)
    if out.requires_grad:
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)), "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def square(a: Node) -> Node:
    return _make(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


def abs_(a: Node) -> Node:
    return _make(np.abs(a.value), (a,), lambda g: (np.sign(a.value) * g,), "abs")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def elu_value(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_slope(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0, alpha * np.exp(np.minimum(x, 0.0)))


def elu(a: Node, alpha: float = 1.0) -> Node:
    if not alpha > 0:
        raise ValueError(f"elu: alpha must be positive, got {alpha}")
    slope = elu_slope(a.value, alpha)
    return _make(elu_value(a.value, alpha), (a,), lambda g: (g * slope,), "elu")


# --- linear algebra / structure -------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(nodes)
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[n.shape for n in nodes]}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(nodes)
    try:
        out = np.stack([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[n.shape for n in nodes]}") from None
    return _make(out, nodes,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(nodes))), "stack")


def gather(a: Node, index) -> Node:
    """Pick ``a[b, index[b]]`` from a (batch, width) block."""
    index = np.asarray(index, dtype=np.int64)
    if a.value.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather: need (B, m) values and (B,) indices, got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.value)
        out[rows, index] = g
        return (out,)

    return _make(a.value[rows, index], (a,), back, "gather")


# --- reductions -------------------------------------------------------------

def sum_(a: Node, axis: int | None = None) -> Node:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), back, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            return (np.full(a.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / n,)

    return _make(a.value.mean(axis=axis), (a,), back, "mean")


def _select(a: Node, axis: int | None, pick, op: str) -> Node:
    if axis is None:
        flat = pick(a.value.reshape(-1))
        value = a.value.reshape(-1)[flat]

        def back(g):
            out = np.zeros(a.value.size)
            out[flat] = g
            return (out.reshape(a.shape),)

        return _make(value, (a,), back, op)

    idx = np.expand_dims(pick(a.value, axis=axis), axis)
    value = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)

    def back(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(value, (a,), back, op)


def min_(a: Node, axis: int | None = None) -> Node:
    """Minimum; on exact ties the gradient goes to the lowest index."""
    return _select(a, axis, np.argmin, "min")


def max_(a: Node, axis: int | None = None) -> Node:
    """Maximum; on exact ties the gradient goes to the lowest index."""
    return _select(a, axis, np.argmax, "max")


# --- backward ----------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[ParamBlock | Node]) -> None:
    for p in params:
        (p.node if isinstance(p, ParamBlock) else p).zero_grad()


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheck:
    passed: bool
    max_rel_error: float


def finite_diff_check(f: Callable[[], Node], params: Sequence[ParamBlock | Node],
                      h: float = 1e-5, tol: float = 1e-4, abs_floor: float = 1e-8) -> GradCheck:
    """Compare backward() against central differences for every parameter entry.

    ``f`` is re-evaluated from scratch for each perturbation and must read the
    current parameter values.  Entries whose absolute disagreement is at most
    ``abs_floor`` count as exact; the rest are scored by
    ``|a - n| / max(|a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    nodes = [p.node if isinstance(p, ParamBlock) else p for p in params]
    zero_grad(nodes)
    root = f()
    if not np.all(np.isfinite(root.value)):
        raise FloatingPointError("finite_diff_check: f produced a non-finite value")
    backward(root)
    worst = 0.0
    for node in nodes:
        analytic = node.grad.copy()
        flat = node.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f().value
            flat[j] = orig - h
            down = f().value
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("finite_diff_check: f produced a non-finite value")
            numeric = float((up - down) / (2.0 * h))
            a = float(analytic.reshape(-1)[j])
            diff = abs(a - numeric)
            if diff > abs_floor:
                worst = max(worst, diff / max(abs(a), abs(numeric)))
    zero_grad(nodes)
    return GradCheck(worst <= tol, worst)
