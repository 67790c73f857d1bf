"""Dense float64 arrays with reverse-mode automatic differentiation.

Values are plain numpy arrays (row-major, float64). A :class:`Node` wraps a
value, an optional gradient buffer and the closures needed to push gradients
back to its parents. Only what the networks, losses and attacks in this
package need is provided.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 array, validating shape and finiteness."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape must have positive dimensions, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor literals must be finite")
    return arr


class Node:
    __slots__ = ("value", "_grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents: tuple = (), requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad: np.ndarray | None = None
        # (parent, vjp) pairs; vjp maps this node's grad to the parent's contribution
        self.parents: tuple[tuple[Node, Callable[[np.ndarray], np.ndarray]], ...] = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Node{tag}(shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str = "") -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, *edges) -> Node:
    kept = tuple((p, f) for p, f in edges if p.requires_grad)
    out = Node(value, kept)
    return out


def detach(x) -> np.ndarray:
    return _lift(x).value.copy()


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))


def affine(x, w, bias) -> Node:
    """x @ w + bias, with the bias row broadcast over the batch."""
    x, w, bias = _lift(x), _lift(w), _lift(bias)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shapes {x.shape} and {w.shape} do not chain")
    if bias.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match output width {w.shape[1]}")
    xv, wv = x.value, w.value
    return _make(
        xv @ wv + bias.value,
        (x, lambda g: g @ wv.T),
        (w, lambda g: xv.T @ g),
        (bias, lambda g: g.sum(axis=0)),
    )


def add_bias(x, bias) -> Node:
    x, bias = _lift(x), _lift(bias)
    if x.value.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {x.shape}")
    return _make(x.value + bias.value, (x, lambda g: g), (bias, lambda g: g.sum(axis=0)))


# --- elementwise --------------------------------------------------------------

def _pair(a, b) -> tuple[Node, Node]:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise DimensionError(f"elementwise shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Node:
    a, b = _pair(a, b)
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _pair(a, b)
    return _make(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    )


def relu(x) -> Node:
    x = _lift(x)
    mask = (x.value > 0).astype(np.float64)
    return _make(x.value * mask, (x, lambda g: g * mask))


max0 = relu


def tanh(x) -> Node:
    x = _lift(x)
    y = np.tanh(x.value)
    return _make(y, (x, lambda g: g * (1.0 - y * y)))


def exp(x) -> Node:
    x = _lift(x)
    y = np.exp(x.value)
    return _make(y, (x, lambda g: g * y))


def log(x) -> Node:
    x = _lift(x)
    if np.any(x.value <= 0):
        raise DomainError("log of a non-positive value")
    xv = x.value
    return _make(np.log(xv), (x, lambda g: g / xv))


def abs_(x) -> Node:
    x = _lift(x)
    s = np.sign(x.value)
    return _make(np.abs(x.value), (x, lambda g: g * s))


def clip(x, lo, hi) -> Node:
    """Clamp to [lo, hi]; gradient passes only where the value is inside."""
    x = _lift(x)
    y = np.clip(x.value, lo, hi)
    mask = ((x.value >= lo) & (x.value <= hi)).astype(np.float64)
    return _make(y, (x, lambda g: g * mask))


def elementwise(op: str, *args) -> Node:
    fns = {
        "add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh,
        "exp": exp, "log": log, "abs": abs_, "max0": max0,
    }
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](*args)


def batch_standardize(x, eps: float = 1e-5) -> Node:
    """Standardize each column over the batch axis (batch-norm without affine)."""
    x = _lift(x)
    if x.value.ndim != 2:
        raise DimensionError(f"batch_standardize expects (b, d), got {x.shape}")
    mu = x.value.mean(axis=0)
    inv = 1.0 / np.sqrt(x.value.var(axis=0) + eps)
    y = (x.value - mu) * inv

    def vjp(g):
        return inv * (g - g.mean(axis=0) - y * (g * y).mean(axis=0))

    return _make(y, (x, vjp))


# --- reductions and shape helpers -------------------------------------------

def sum_(x, axis: int | None = None) -> Node:
    """Sum everything (scalar result) or along one axis keeping it as size 1."""
    x = _lift(x)
    if axis is None:
        return _make(np.asarray(x.value.sum()), (x, lambda g: np.broadcast_to(g, x.shape).copy()))
    y = x.value.sum(axis=axis, keepdims=True)
    return _make(y, (x, lambda g: np.broadcast_to(g, x.shape).copy()))


def mean(x) -> Node:
    x = _lift(x)
    n = x.value.size
    return _make(np.asarray(x.value.mean()), (x, lambda g: np.full(x.shape, float(g) / n)))


def tile_cols(x, n: int) -> Node:
    """Repeat a (b, 1) column n times to (b, n)."""
    x = _lift(x)
    if x.value.ndim != 2 or x.shape[1] != 1:
        raise DimensionError(f"tile_cols expects a (b, 1) column, got {x.shape}")
    return _make(np.repeat(x.value, n, axis=1), (x, lambda g: g.sum(axis=1, keepdims=True)))


def logsumexp(logits) -> Node:
    """Row-wise log-sum-exp, shape (b, 1)."""
    z = _lift(logits)
    m = z.value.max(axis=1, keepdims=True)
    e = np.exp(z.value - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return _make(m + np.log(s), (z, lambda g: g * p))


def softmax(logits) -> Node:
    z = _lift(logits)
    if z.value.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"softmax expects (b, C>=2) logits, got {z.shape}")
    p = softmax_array(z.value)

    def vjp(g):
        return p * (g - (g * p).sum(axis=1, keepdims=True))

    return _make(p, (z, vjp))


def log_softmax(logits) -> Node:
    z = _lift(logits)
    return sub(z, tile_cols(logsumexp(z), z.shape[1]))


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --- backward -------------------------------------------------------------------

def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Interior nodes get fresh buffers per call; leaves (parameters, inputs)
    accumulate across calls until zeroed.
    """
    if not isinstance(loss, Node) or loss.value.size != 1:
        shape = loss.shape if isinstance(loss, Node) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    order = _topo(loss)
    for node in order:
        if node.parents:
            node._grad = None
    loss._grad = np.ones_like(loss.value)
    for node in reversed(order):
        if not node.parents or node._grad is None:
            continue
        g = node._grad
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent._grad is None:
                parent._grad = np.array(contrib, dtype=np.float64).reshape(parent.shape)
            else:
                parent._grad = parent._grad + contrib


def grad_wrt(loss_fn: Callable[[Node], Node], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar function of an array input."""
    xn = param(x)
    loss = loss_fn(xn)
    backward(loss)
    return float(loss.value), xn.grad.copy()


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()
