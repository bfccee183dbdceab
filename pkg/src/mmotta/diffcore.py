"""Minimal reverse-mode differentiation over dense float64 arrays.

Every op returns a :class:`Node`. Gradients are accumulated into ``Node.grad``
for every node created with ``requires_grad=True`` (parameters and inputs);
intermediate adjoints live only for the duration of one ``backward`` call.

Broadcasting is deliberately narrow: binary elementwise ops accept either
equal shapes or one operand of size 1 (a scalar). Row-wise bias addition
goes through :func:`add_rowvec`.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EPS_LOG = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


_local = threading.local()


class Tape:
    """Ordered record of nodes created during one forward pass.

    Use as a context manager; nodes created inside the block are appended in
    creation order, which is a topological order. Tapes are thread-confined.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Node:
    """A value in the computation graph.

    ``parents`` and ``backward_fn`` form the provenance: ``backward_fn`` maps
    the output adjoint to a tuple of parent adjoints (``None`` where a
    parent needs none).
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(())
        self.value = value
        self.value.setflags(write=False)
        self.grad = np.zeros_like(value)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        tape = _current_tape()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_node(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def _make(value, parents: tuple, backward_fn, op: str) -> Node:
    return Node(value, parents=parents, backward_fn=backward_fn, op=op)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), backward, "matmul")


def add_rowvec(x: Node, row: Node) -> Node:
    """x (B, n) + row (n,) broadcast over rows."""
    if x.value.ndim != 2 or row.value.ndim != 1 or x.shape[1] != row.shape[0]:
        raise DimensionError(f"add_rowvec needs (B, n) + (n,), got {x.shape} + {row.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _make(x.value + row.value, (x, row), backward, "add_rowvec")


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    nodes = tuple(nodes)
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(value, nodes, backward, "concat")


def column(x: Node, j: int) -> Node:
    """Select column ``j`` of a 2-D node, giving shape (B,)."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _make(x.value[:, j], (x,), backward, "column")


# ---------------------------------------------------------------------------
# elementwise

def _check_binary(a: Node, b: Node, op: str):
    if a.shape == b.shape or a.value.size == 1 or b.value.size == 1:
        return
    raise DimensionError(f"{op}: unsupported broadcast {a.shape} with {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a: Node, b: Node) -> Node:
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Node, b: Node) -> Node:
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Node, b: Node) -> Node:
    _check_binary(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def scale(x: Node, c: float) -> Node:
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Node) -> Node:
    return _make(-x.value, (x,), lambda g: (-g,), "neg")


def log(x: Node) -> Node:
    """Guarded natural log: log(x + EPS_LOG)."""
    shifted = x.value + EPS_LOG
    return _make(np.log(shifted), (x,), lambda g: (g / shifted,), "log")


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(x: Node) -> Node:
    # subgradient 0 at exactly 0
    sign = np.sign(x.value)
    return _make(np.abs(x.value), (x,), lambda g: (g * sign,), "abs")


_UNARY = {"log": log, "exp": exp, "tanh": tanh, "abs": abs_, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs, c: float | None = None) -> Node:
    """Dispatch by name; ``scale`` takes its constant through ``c``."""
    if op in _UNARY:
        (x,) = inputs
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = inputs
        return _BINARY[op](_as_node(a), _as_node(b))
    if op == "scale":
        (x,) = inputs
        return scale(x, float(c))
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# softmax and reductions

def softmax(logits: Node, axis: int = -1) -> Node:
    z = logits.value - logits.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (logits,), backward, "softmax")


def reduce_sum(x: Node, axis: int | None = None) -> Node:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.value.sum(axis=axis), (x,), backward, "sum")


def reduce_mean(x: Node, axis: int | None = None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


def reduce(op: str, x: Node, axis: int | None = None) -> Node:
    if op == "sum":
        return reduce_sum(x, axis)
    if op == "mean":
        return reduce_mean(x, axis)
    raise ValueError(f"unknown reduction {op!r}")


def detach(x: Node) -> Node:
    """Same value, no gradient path back to ``x``."""
    return Node(x.value.copy(), op="detach")


# ---------------------------------------------------------------------------

def _topological(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requires_grad ancestor."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg
