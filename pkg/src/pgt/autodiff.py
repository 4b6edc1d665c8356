"""Reverse-mode automatic differentiation over numpy arrays.

Graphs are built eagerly: every op returns a :class:`Node` holding its value,
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks the graph once, deposits gradients into leaf buffers
and (unless ``retain_graph``) releases every node so the step's activations
can be reclaimed.  Leaf buffers outlive the graph, which is what lets
gradients accumulate across progressive steps.

:func:`stop_gradient` is a first-class node kind: forward identity, backward
zero.  :func:`track_activations` counts the elements held by live graph nodes
and is used by the memory profiler.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Node", "Parameter", "constant", "leaf", "stop_gradient", "backward",
    "finite_difference_grad", "track_activations", "truncation_disabled",
    "add", "sub", "mul", "scale", "neg", "relu", "power", "sum", "mean", "amax",
    "mix", "concat", "take", "reshape", "cross_entropy",
]

LEAF, OP, STOP = "leaf", "op", "stop_gradient"

_trackers: list["ActivationTracker"] = []
_truncation = [True]


class ActivationTracker:
    """Live/peak element counts of graph activations created while active."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _add(self, n):
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def _sub(self, n):
        self.live -= n


@contextlib.contextmanager
def track_activations() -> Iterator[ActivationTracker]:
    tracker = ActivationTracker()
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


@contextlib.contextmanager
def truncation_disabled():
    """Test hook: make :func:`stop_gradient` pass gradients through.

    Only used for negative controls of the truncation checks.
    """
    _truncation[0] = False
    try:
        yield
    finally:
        _truncation[0] = True


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "kind",
                 "requires_grad", "name", "_count", "_trackers")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule=None,
                 kind: str = OP, requires_grad: bool | None = None,
                 name: str | None = None, counted: bool = True):
        self.value = value
        self.parents = tuple(parents)
        self._backward = backward_rule
        self.kind = kind
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(value) if kind == LEAF and requires_grad else None
        self._count = 0
        self._trackers = ()
        if counted and _trackers:
            self._count = int(np.size(value))
            self._trackers = tuple(_trackers)
            for t in self._trackers:
                t._add(self._count)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def release(self):
        """Drop graph references and stop counting this node as live."""
        self.parents = ()
        self._backward = None
        for t in self._trackers:
            t._sub(self._count)
        self._trackers = ()
        self._count = 0

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.kind}{label} shape={self.value.shape}>"

    __array_priority__ = 100

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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Node):
    """Trainable leaf; its ``grad`` buffer persists across graphs."""

    __slots__ = ()

    def __init__(self, value, name: str | None = None):
        super().__init__(np.asarray(value), kind=LEAF, requires_grad=True,
                         name=name, counted=False)


def leaf(value, name=None) -> Node:
    """Differentiable input (e.g. a sequence whose input-gradient is wanted)."""
    return Node(np.asarray(value), kind=LEAF, requires_grad=True, name=name)


def constant(value, name=None) -> Node:
    return Node(np.asarray(value), kind=LEAF, requires_grad=False, name=name)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else None
    return constant(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops

def stop_gradient(x: Node) -> Node:
    """Identity forward; contributes nothing to ``x`` on the backward pass."""
    if not _truncation[0]:
        return Node(x.value, (x,), lambda g: (g,), counted=False)
    return Node(x.value, (x,), None, kind=STOP, requires_grad=False, counted=False)


def add(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    va, vb = a.value, b.value
    return Node(va * vb, (a, b),
                lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def scale(x: Node, c: float) -> Node:
    c = x.value.dtype.type(c)
    return Node(x.value * c, (x,), lambda g: (g * c,))


def neg(x: Node) -> Node:
    return Node(-x.value, (x,), lambda g: (-g,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    # np.maximum keeps NaN, so a diverged input still shows up in the loss
    return Node(np.maximum(x.value, x.value.dtype.type(0)), (x,),
                lambda g: (g * mask,))


def power(x: Node, p: float) -> Node:
    v = x.value
    return Node(v ** p, (x,), lambda g: (g * p * v ** (p - 1),))


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    shape = x.value.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    shape = x.value.shape
    n = x.value.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return Node(np.mean(x.value, axis=axis, keepdims=keepdims), (x,), rule)


def amax(x: Node, axis: int) -> Node:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    xv = x.value
    idx = np.expand_dims(np.argmax(xv, axis=axis), axis)

    def rule(g):
        full = np.zeros_like(xv)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Node(np.take_along_axis(xv, idx, axis=axis).squeeze(axis), (x,), rule)


def mix(x: Node, w: Node, axis: int) -> Node:
    """Contract axis ``axis`` of ``x`` with the first axis of matrix ``w``.

    The contracted axis is replaced in place by ``w``'s second axis, so a
    channel mix on ``[B, T, C, H, W]`` with ``axis=2`` keeps the layout.
    """
    xv, wv = x.value, w.value
    axis = axis % xv.ndim
    if xv.shape[axis] != wv.shape[0]:
        raise ShapeError(f"channel mismatch: input has {xv.shape[axis]}, weights expect {wv.shape[0]}")
    out = np.moveaxis(np.tensordot(xv, wv, axes=([axis], [0])), -1, axis)

    def rule(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.moveaxis(np.tensordot(gm, wv, axes=([-1], [1])), -1, axis)
        xm = np.moveaxis(xv, axis, -1)
        lead = tuple(range(xm.ndim - 1))
        gw = np.tensordot(xm, gm, axes=(lead, lead))
        return gx, gw

    return Node(out, (x, w), rule)


def concat(nodes: Sequence[Node], axis: int) -> Node:
    nodes = list(nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i in range(len(nodes)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, rule)


def take(x: Node, index) -> Node:
    """Basic (slice/integer) indexing; the result is a view and not counted."""
    shape, dtype = x.value.shape, x.value.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return Node(x.value[index], (x,), rule, counted=False)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), counted=False)


def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy; ``logits`` is ``[K]`` or ``[B, K]``."""
    z = logits.value
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    zmax = z.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite logits are reported by the caller
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()
    b = z.shape[0]

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        d *= g / b
        return (d[0] if squeeze else d,)

    return Node(np.asarray(loss, dtype=z.dtype), (logits,), rule)


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
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


def backward(loss: Node, accumulate: bool = False, retain_graph: bool = False) -> None:
    """Deposit dloss/dleaf into every differentiable leaf's ``grad`` buffer.

    With ``accumulate=False`` the buffers of this graph's leaves are zeroed
    first.  Unless ``retain_graph`` is set, every node of the graph is
    released afterwards.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not np.all(np.isfinite(loss.value)):
        raise NumericError(f"non-finite loss {loss.value!r}")
    order = _topo(loss)
    if not accumulate:
        for node in order:
            if node.kind == LEAF:
                node.zero_grad()
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is not None:
            if node.kind == LEAF:
                node.grad += g
            elif node._backward is not None:
                for parent, pg in zip(node.parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if not retain_graph:
            node.release()


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        hi = float(f(x))
        x.flat[i] = orig - eps
        lo = float(f(x))
        x.flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite function value at element {i}")
        out.flat[i] = (hi - lo) / (2 * eps)
    return out
