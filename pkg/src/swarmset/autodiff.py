"""Reverse-mode autodiff over dense numpy arrays, with masked set reductions.

Everything downstream (set layers, population-pooled recurrent cells, losses)
is expressed through the ops in this module.  Values are plain numpy arrays in
a configurable precision: float32 for training throughput, float64 for
gradient checking.  Graphs are built eagerly during the forward pass and
differentiated with `backward`.

Reduction order: all masked reductions over the entity axis accumulate in
float64 with numpy's pairwise summation over ascending entity index, then cast
back to the storage dtype.  This keeps pooled values stable enough that
permuting entities moves results by at most a final-rounding ulp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class CardinalityError(ValueError):
    """A population batch carries an invalid entity count."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (forward numerics only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """One value in the computation graph.

    `parents` holds (parent node, vjp) pairs; the vjp maps this node's output
    gradient to the parent's gradient contribution.  `grad` is allocated
    lazily; repeated `backward` calls without zeroing accumulate into it.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self):
        return self.value.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

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


def as_node(x, dtype=None) -> Node:
    """Lift an array or scalar to a constant Node (no-op on Nodes)."""
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Node(arr)


def constant(x, dtype=None) -> Node:
    return as_node(x, dtype=dtype)


def parameter(x, dtype=None) -> Node:
    """A leaf node that receives gradients."""
    arr = np.array(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Node(arr, requires_grad=True)


def _make(value, parents) -> Node:
    """Assemble an op output; prunes the graph when no parent needs gradients."""
    if _grad_enabled and any(p.requires_grad for p, _ in parents):
        return Node(value, tuple(parents), requires_grad=True)
    return Node(value)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value + b.value
    return _make(value, [(a, lambda g: _unbroadcast(g, a.value.shape)),
                         (b, lambda g: _unbroadcast(g, b.value.shape))])


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value - b.value
    return _make(value, [(a, lambda g: _unbroadcast(g, a.value.shape)),
                         (b, lambda g: _unbroadcast(-g, b.value.shape))])


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    value = a.value * b.value
    return _make(value, [(a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
                         (b, lambda g: _unbroadcast(g * a.value, b.value.shape))])


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, [(a, lambda g: -g)])


def sigmoid(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        value = 1.0 / (1.0 + np.exp(-a.value))
    value = value.astype(a.value.dtype, copy=False)
    return _make(value, [(a, lambda g: g * value * (1.0 - value))])


def tanh(a) -> Node:
    a = as_node(a)
    value = np.tanh(a.value)
    return _make(value, [(a, lambda g: g * (1.0 - value * value))])


def relu(a) -> Node:
    a = as_node(a)
    value = np.maximum(a.value, 0)
    return _make(value, [(a, lambda g: g * (a.value > 0))])


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _make(value, [(a, lambda g: g * value)])


def log(a) -> Node:
    # Domain violations yield non-finite values; the trainer's divergence
    # check is responsible for catching them, not this op.
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
        return _make(value, [(a, lambda g: g / a.value)])


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes inside the closed interval."""
    a = as_node(a)
    value = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(value, [(a, lambda g: g * inside)])


_ELEMENTWISE = {}


def elementwise(op: str, *inputs) -> Node:
    """Dispatch by name over {sigmoid, tanh, relu, exp, log, add, mul, sub}."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


_ELEMENTWISE.update(sigmoid=sigmoid, tanh=tanh, relu=relu, exp=exp, log=log,
                    add=add, mul=mul, sub=sub)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Node:
    """2-d matrix product with the standard transpose backward rules."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes do not chain: {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value
    return _make(value, [(a, lambda g: g @ b.value.T),
                         (b, lambda g: a.value.T @ g)])


def dot_feature(w, x) -> Node:
    """Apply a shared [d_out, d_in] map over the feature axis of [B, d_in, N]."""
    w, x = as_node(w), as_node(x)
    if w.value.ndim != 2 or x.value.ndim != 3 or w.value.shape[1] != x.value.shape[1]:
        raise ShapeError(f"dot_feature shapes do not chain: {w.value.shape} over {x.value.shape}")
    value = np.tensordot(w.value, x.value, axes=([1], [1])).transpose(1, 0, 2)

    def back_w(g):
        return np.tensordot(g, x.value, axes=([0, 2], [0, 2]))

    def back_x(g):
        return np.tensordot(w.value, g, axes=([0], [1])).transpose(1, 0, 2)

    return _make(np.ascontiguousarray(value), [(w, back_w), (x, back_x)])


def transpose2d(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.value.shape}")
    return _make(np.ascontiguousarray(a.value.T), [(a, lambda g: g.T)])


def concat_entities(blocks) -> Node:
    """Concatenate [B, D, 1] slices along the entity axis."""
    value = np.concatenate([b.value for b in blocks], axis=2)
    parents = []
    for i, b in enumerate(blocks):
        def back(g, i=i):
            return g[:, :, i : i + 1]
        parents.append((b, back))
    return _make(value, parents)


def concat_features(a, b) -> Node:
    """Concatenate two [B, D, N] blocks along the feature axis."""
    a, b = as_node(a), as_node(b)
    if a.value.shape[0] != b.value.shape[0] or a.value.shape[2] != b.value.shape[2]:
        raise ShapeError(f"concat_features batch/entity axes differ: {a.value.shape} vs {b.value.shape}")
    da = a.value.shape[1]
    value = np.concatenate([a.value, b.value], axis=1)
    return _make(value, [(a, lambda g: g[:, :da, :]),
                         (b, lambda g: g[:, da:, :])])


def reshape(a, shape) -> Node:
    a = as_node(a)
    value = a.value.reshape(shape)
    return _make(value, [(a, lambda g: g.reshape(a.value.shape))])


def take(a, key) -> Node:
    """Basic-indexing view with scatter-add backward."""
    a = as_node(a)
    value = a.value[key]

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return out

    return _make(np.array(value, copy=True), [(a, back)])


def sum_all(a) -> Node:
    a = as_node(a)
    value = np.asarray(a.value.sum())
    return _make(value, [(a, lambda g: np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False))])


def sum_axis(a, axis: int, keepdims: bool = False) -> Node:
    a = as_node(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=False)

    return _make(value, [(a, back)])


def logsumexp(a, axis: int, keepdims: bool = False) -> Node:
    """Stable log-sum-exp along one axis; backward is the softmax."""
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    with np.errstate(over="ignore"):
        s = np.exp(a.value - m).sum(axis=axis, keepdims=True)
    lse = m + np.log(s)
    softmax = np.exp(a.value - lse)
    value = lse if keepdims else np.squeeze(lse, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (softmax * g).astype(a.value.dtype, copy=False)

    return _make(value.astype(a.value.dtype, copy=False), [(a, back)])


def log_softmax(a, axis: int) -> Node:
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    with np.errstate(over="ignore"):
        s = np.exp(a.value - m).sum(axis=axis, keepdims=True)
    lse = m + np.log(s)
    value = (a.value - lse).astype(a.value.dtype, copy=False)
    softmax = np.exp(value)

    def back(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True)).astype(a.value.dtype, copy=False)

    return _make(value, [(a, back)])


# ---------------------------------------------------------------------------
# masked reductions over the entity axis
# ---------------------------------------------------------------------------


def entity_mask(lengths, n_entities: int, dtype=np.float64) -> np.ndarray:
    """[B, N] mask: 1 at valid entity positions, 0 at padding."""
    lengths = np.asarray(lengths, dtype=np.int64)
    return (np.arange(n_entities) < lengths[:, None]).astype(dtype)


def _check_lengths(lengths, n_entities: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1:
        raise CardinalityError(f"lengths must be 1-d, got shape {lengths.shape}")
    if np.any(lengths < 1) or np.any(lengths > n_entities):
        raise CardinalityError(f"lengths must lie in [1, {n_entities}], got {lengths.tolist()}")
    return lengths


def masked_mean(x, lengths) -> Node:
    """Per-task mean over valid entities: [B, D, N] -> [B, D].

    Padding positions never contribute, whatever values they hold.
    """
    x = as_node(x)
    B, D, N = x.value.shape
    lengths = _check_lengths(lengths, N)
    mask = entity_mask(lengths, N)
    sums = (x.value.astype(np.float64, copy=False) * mask[:, None, :]).sum(axis=2)
    value = (sums / lengths[:, None]).astype(x.value.dtype, copy=False)

    def back(g):
        spread = (g / lengths[:, None])[:, :, None] * mask[:, None, :]
        return spread.astype(x.value.dtype, copy=False)

    return _make(value, [(x, back)])


def masked_max(x, lengths) -> Node:
    """Per-task max over valid entities; gradient goes to the lowest argmax index."""
    x = as_node(x)
    B, D, N = x.value.shape
    lengths = _check_lengths(lengths, N)
    valid = entity_mask(lengths, N).astype(bool)
    masked = np.where(valid[:, None, :], x.value, -np.inf)
    idx = np.argmax(masked, axis=2)
    value = np.take_along_axis(x.value, idx[:, :, None], axis=2)[:, :, 0]

    def back(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx[:, :, None], g[:, :, None].astype(x.value.dtype, copy=False), axis=2)
        return out

    return _make(value, [(x, back)])


def broadcast_entities(x, lengths, n_entities: int) -> Node:
    """Spread a per-task [B, D] vector over entities: padding stays zero."""
    x = as_node(x)
    B, D = x.value.shape
    lengths = _check_lengths(lengths, n_entities)
    mask = entity_mask(lengths, n_entities, dtype=x.value.dtype)
    value = x.value[:, :, None] * mask[:, None, :]

    def back(g):
        return (g * mask[:, None, :]).sum(axis=2).astype(x.value.dtype, copy=False)

    return _make(value, [(x, back)])


def causal_mean(x, lengths) -> Node:
    """Strict-prefix running mean over the entity axis: [B, D, N] -> [B, D, N].

    out[..., i] averages positions 0..i-1; position 0 gets 0 (empty prefix).
    Output at position i is bitwise independent of inputs at positions >= i.
    """
    x = as_node(x)
    B, D, N = x.value.shape
    lengths = _check_lengths(lengths, N)
    mask = entity_mask(lengths, N)
    cs = np.cumsum(x.value, axis=2, dtype=np.float64)
    out = np.zeros((B, D, N), dtype=np.float64)
    if N > 1:
        out[:, :, 1:] = cs[:, :, :-1] / np.arange(1, N, dtype=np.float64)
    out *= mask[:, None, :]
    value = out.astype(x.value.dtype, copy=False)

    def back(g):
        w = np.zeros((B, D, N), dtype=np.float64)
        if N > 1:
            w[:, :, 1:] = g[:, :, 1:] / np.arange(1, N, dtype=np.float64)
        w *= mask[:, None, :]
        rev = np.cumsum(w[:, :, ::-1], axis=2)[:, :, ::-1]
        return (rev - w).astype(x.value.dtype, copy=False)

    return _make(value, [(x, back)])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every reachable requires_grad node.

    `root` must be scalar-shaped.  Grads accumulate across repeated calls;
    zero them explicitly between steps.
    """
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar-shaped, got shape {root.value.shape}")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# population batches
# ---------------------------------------------------------------------------


@dataclass
class PopulationBatch:
    """A batch of variable-cardinality entity sets.

    `values` is [B, D, N_max] (array or Node); `lengths[b]` is the true entity
    count of task b.  Entries at positions >= lengths[b] are zero padding and
    must never influence masked reductions or losses.
    """

    values: object
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        arr = self.values.value if isinstance(self.values, Node) else np.asarray(self.values)
        if arr.ndim != 3:
            raise ShapeError(f"batch values must be [B, D, N], got shape {arr.shape}")
        _check_lengths(self.lengths, arr.shape[2])
        if len(self.lengths) != arr.shape[0]:
            raise ShapeError(f"{len(self.lengths)} lengths for batch of {arr.shape[0]}")

    @classmethod
    def from_arrays(cls, values: np.ndarray, lengths) -> "PopulationBatch":
        """Build from a dense array, zeroing anything stored in padding."""
        values = np.array(values, copy=True)
        if values.dtype.kind != "f":
            values = values.astype(np.float64)
        batch = cls(values, lengths)
        values *= entity_mask(batch.lengths, values.shape[2], dtype=values.dtype)[:, None, :]
        return batch

    @property
    def node(self) -> Node:
        if not isinstance(self.values, Node):
            self.values = as_node(self.values)
        return self.values

    @property
    def array(self) -> np.ndarray:
        return self.values.value if isinstance(self.values, Node) else self.values

    @property
    def batch_size(self) -> int:
        return self.array.shape[0]

    @property
    def n_features(self) -> int:
        return self.array.shape[1]

    @property
    def n_entities(self) -> int:
        return self.array.shape[2]

    def mask(self, dtype=None) -> np.ndarray:
        return entity_mask(self.lengths, self.n_entities, dtype=dtype or self.array.dtype)
