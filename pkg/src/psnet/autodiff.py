"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Node` that remembers its parents and a
closure propagating the upstream gradient to them. ``backward`` walks the
graph in reverse topological order. Gradients accumulate additively on every
node that requires them, so callers zero parameter gradients between steps.

Values are numpy arrays. The matrix contract is per example: a batch of
sequences is carried along leading axes, and matmul broadcasts over them.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its contract (e.g. non-scalar backward)."""


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Sequence["Node"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        op: str = "",
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return index(self, key)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _accum(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    # never in place: gradient arrays may be shared between nodes
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents: Iterable[Node], backward, op: str) -> Node:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward, op)
    return Node(value, op=op)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, "add")


def sub(a: Node, b: Node) -> Node:
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a: Node, b: Node) -> Node:
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return _make(out, (a, b), backward, "mul")


def scale(a: Node, c: float) -> Node:
    def backward(g):
        _accum(a, g * c)

    return _make(a.value * c, (a,), backward, "scale")


def add_constant(a: Node, const: np.ndarray) -> Node:
    """``a + const`` where ``const`` never receives gradient (e.g. a mask)."""

    def backward(g):
        _accum(a, g)

    return _make(a.value + const, (a,), backward, "add_constant")


def matmul(a: Node, b: Node) -> Node:
    """Matrix product, batched over any leading axes of ``a`` (and ``b``)."""
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.value, b.value)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            if b.value.ndim == 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
            _accum(b, gb)

    return _make(out, (a, b), backward, "matmul")


def linear(x: Node, w: Node, b: Node) -> Node:
    """``x @ w + b`` for ``x`` of shape ``(..., k)``, ``w`` ``(k, n)``, ``b`` ``(n,)``."""
    if w.value.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.value @ w.value + b.value

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, g @ w.value.T)
        if w.requires_grad:
            _accum(w, x.value.reshape(-1, x.shape[-1]).T @ g2)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _make(out, (x, w, b), backward, "linear")


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    B, L, d = t.shape
    return t.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    B, h, L, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def attention_scores(x: Node, wq: Node, bq: Node, wk: Node, bk: Node, heads: int) -> Node:
    """Scaled dot-product scores ``(B, h, L, L)`` before masking and softmax."""
    if x.value.ndim != 3 or x.shape[-1] % heads:
        raise DimensionError(f"attention_scores: bad input {x.shape} for {heads} heads")
    dh = x.shape[-1] // heads
    c = 1.0 / math.sqrt(dh)
    q = _split_heads(x.value @ wq.value + bq.value, heads)
    k = _split_heads(x.value @ wk.value + bk.value, heads)
    out = np.matmul(q, k.transpose(0, 1, 3, 2)) * c

    def backward(g):
        gq = _merge_heads(np.matmul(g, k) * c)
        gk = _merge_heads(np.matmul(g.transpose(0, 1, 3, 2), q) * c)
        x2 = x.value.reshape(-1, x.shape[-1])
        gq2, gk2 = gq.reshape(x2.shape), gk.reshape(x2.shape)
        if x.requires_grad:
            _accum(x, gq @ wq.value.T + gk @ wk.value.T)
        _accum(wq, x2.T @ gq2)
        _accum(bq, gq2.sum(axis=0))
        _accum(wk, x2.T @ gk2)
        _accum(bk, gk2.sum(axis=0))

    return _make(out, (x, wq, bq, wk, bk), backward, "attention_scores")


def attend(scores: Node, x: Node, wv: Node, bv: Node, mask: np.ndarray | None = None) -> Node:
    """Softmax over keys, weighted sum of value projections, heads merged.

    ``mask`` is added to the scores (constant, e.g. -1e9 on padded keys).
    Returns ``(B, L, d)``.
    """
    heads = scores.shape[1]
    s = scores.value if mask is None else scores.value + mask
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    v = _split_heads(x.value @ wv.value + bv.value, heads)
    out = _merge_heads(np.matmul(p, v))

    def backward(g):
        gh = _split_heads(g, heads)
        gp = np.matmul(gh, v.transpose(0, 1, 3, 2))
        _accum(scores, p * (gp - (gp * p).sum(axis=-1, keepdims=True)))
        gv = _merge_heads(np.matmul(p.transpose(0, 1, 3, 2), gh))
        gv2 = gv.reshape(-1, gv.shape[-1])
        if x.requires_grad:
            _accum(x, gv @ wv.value.T)
        _accum(wv, x.value.reshape(-1, x.shape[-1]).T @ gv2)
        _accum(bv, gv2.sum(axis=0))

    return _make(out, (scores, x, wv, bv), backward, "attend")


def transpose(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.value, axes), (a,), backward, "transpose")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.value.reshape(shape), (a,), backward, "reshape")


def index(a: Node, key) -> Node:
    """Basic (slice/integer) indexing; no fancy indexing."""

    def backward(g):
        full = np.zeros_like(a.value)
        full[key] = g
        _accum(a, full)

    return _make(a.value[key], (a,), backward, "index")


def embedding(table: Node, ids: np.ndarray) -> Node:
    """Row gather ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, full)

    return _make(table.value[ids], (table,), backward, "embedding")


def detach(a: Node) -> Node:
    """Same value, cut from the graph: nothing upstream receives gradient."""
    return Node(a.value, op="detach")


def total(a: Node) -> Node:
    """Sum of all entries, as a scalar node."""

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(a.value.sum(), (a,), backward, "sum")


def mean(a: Node) -> Node:
    n = a.value.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _make(a.value.mean(), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax_rows(a: Node) -> Node:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (a,), backward, "softmax")


def layer_norm(a: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
    width = a.shape[-1]
    if gain.shape[-1] != width or bias.shape[-1] != width:
        raise DimensionError(f"layer_norm: gain/bias width must be {width}")
    mu = a.value.mean(axis=-1, keepdims=True)
    centred = a.value - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.value + bias.value

    def backward(g):
        if a.requires_grad:
            dx = g * gain.value
            dx = inv_std * (
                dx - dx.mean(axis=-1, keepdims=True) - xhat * (dx * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(a, dx)
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))

    return _make(out, (a, gain, bias), backward, "layer_norm")


def gelu(a: Node) -> Node:
    """GELU, tanh approximation."""
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * d)

    return _make(out, (a,), backward, "gelu")


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Node, labels, reduction: str = "mean") -> Node:
    """Negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(batch, classes)``; ``labels`` an int or one int per row.
    ``reduction`` is ``"mean"`` (default) or ``"sum"`` over rows.
    """
    if logits.value.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    rows, classes = logits.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (rows,):
        raise DimensionError(f"cross_entropy: need {rows} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= classes:
        raise IndexError(f"cross_entropy: label out of range [0, {classes})")
    logp = log_softmax(logits.value)
    picked = -logp[np.arange(rows), labels]
    denom = rows if reduction == "mean" else 1
    loss = picked.sum() / denom

    def backward(g):
        d = np.exp(logp)
        d[np.arange(rows), labels] -= 1.0
        _accum(logits, d * (g / denom))

    return _make(loss, (logits,), backward, "cross_entropy")


def mse(a: Node, b: Node) -> Node:
    """Mean over all entries of the squared difference."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        d = diff * (2.0 * g / n)
        _accum(a, d)
        _accum(b, -d)

    return _make((diff * diff).mean(), (a, b), backward, "mse")


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Node) -> list[Node]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from the scalar ``loss``."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    _accum(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
