"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a 2-D ``numpy.ndarray`` of dtype float64. Operations record a
:class:`Node` on the :class:`Tape` of their inputs; :func:`backward` walks the
tape in reverse and accumulates gradients.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

# Additive mask value for "excluded" softmax entries. Finite on purpose so that
# masks pass the finiteness check; masked outputs are forced to exactly 0.
NEG_SENTINEL = -np.finfo(np.float64).max


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


class DegenerateRowError(ValueError):
    pass


def as_matrix(value, name: str = "value") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array (copy-free when possible)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name}: expected a matrix, got {arr.ndim}-d array")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite entries")
    return arr


class Node:
    __slots__ = ("value", "_grad", "op", "parents", "tape", "_backward")

    def __init__(self, value: np.ndarray, op: str, parents: tuple["Node", ...], tape: "Tape"):
        self.value = value
        self._grad = None
        self.op = op
        self.parents = parents
        self.tape = tape
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; forward-only evaluation never pays for it
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item() on {self.value.shape} node")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Forward-order record of nodes. Confined to one thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str = "leaf") -> Node:
        node = Node(as_matrix(value, name).copy(), name, (), self)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = "const") -> Node:
        return self.leaf(value, name)

    def _record(self, value: np.ndarray, op: str, parents: Sequence[Node], backward) -> Node:
        node = Node(value, op, tuple(parents), self)
        node._backward = backward
        self.nodes.append(node)
        return node

    def zero_grad(self):
        for node in self.nodes:
            node._grad = None

    def release(self):
        """Drop the node list. Nodes point back at their tape, so without this
        a finished tape is only reclaimed by the cyclic collector."""
        self.nodes = []


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    def back(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    # einsum's plain loop makes each output row depend only on its own input row;
    # BLAS kernels round differently by row position, which breaks exact equivariance
    value = np.einsum("ik,kj->ij", a.value, b.value)
    return _tape_of(a, b)._record(value, "matmul", (a, b), back)


def transpose(x: Node) -> Node:
    def back(g):
        x.grad += g.T

    return x.tape._record(x.value.T.copy(), "transpose", (x,), back)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a 1 x cols row vector broadcast over rows."""
    if a.shape == b.shape:
        def back(g):
            a.grad += g
            b.grad += g
    elif b.shape == (1, a.shape[1]):
        def back(g):
            a.grad += g
            b.grad += g.sum(axis=0, keepdims=True)
    else:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _tape_of(a, b)._record(a.value + b.value, "add", (a, b), back)


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)

    def back(g):
        a.grad += g
        b.grad -= g

    return _tape_of(a, b)._record(a.value - b.value, "sub", (a, b), back)


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)

    def back(g):
        a.grad += g * b.value
        b.grad += g * a.value

    return _tape_of(a, b)._record(a.value * b.value, "mul", (a, b), back)


def mul_col(x: Node, col: Node) -> Node:
    """Scale each row of ``x`` by the matching entry of the n x 1 column ``col``."""
    if col.shape != (x.shape[0], 1):
        raise DimensionError(f"mul_col: {x.shape} by {col.shape}")

    def back(g):
        x.grad += g * col.value
        col.grad += np.sum(g * x.value, axis=1, keepdims=True)

    return _tape_of(x, col)._record(x.value * col.value, "mul_col", (x, col), back)


def scale(x: Node, c: float) -> Node:
    c = float(c)

    def back(g):
        x.grad += c * g

    return x.tape._record(c * x.value, "scale", (x,), back)


def add_const(x: Node, c) -> Node:
    """x + c for a fixed scalar or same-shape array ``c`` (no gradient to c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != x.shape:
        raise DimensionError(f"add_const: {x.shape} vs {c.shape}")

    def back(g):
        x.grad += g

    return x.tape._record(x.value + c, "add_const", (x,), back)


def mul_const(x: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != x.shape:
        raise DimensionError(f"mul_const: {x.shape} vs {c.shape}")

    def back(g):
        x.grad += g * c

    return x.tape._record(x.value * c, "mul_const", (x,), back)


def concat_cols(*xs: Node) -> Node:
    if not xs:
        raise DimensionError("concat_cols: no operands")
    rows = xs[0].shape[0]
    for x in xs:
        if x.shape[0] != rows:
            raise DimensionError(f"concat_cols: row mismatch {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            x.grad += g[:, lo:hi]

    value = np.concatenate([x.value for x in xs], axis=1)
    return _tape_of(*xs)._record(value, "concat_cols", xs, back)


def concat_rows(*xs: Node) -> Node:
    if not xs:
        raise DimensionError("concat_rows: no operands")
    cols = xs[0].shape[1]
    for x in xs:
        if x.shape[1] != cols:
            raise DimensionError(f"concat_rows: column mismatch {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            x.grad += g[lo:hi]

    value = np.concatenate([x.value for x in xs], axis=0)
    return _tape_of(*xs)._record(value, "concat_rows", xs, back)


def slice_rows(x: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] of {x.shape}")

    def back(g):
        x.grad[start:stop] += g

    return x.tape._record(x.value[start:stop].copy(), "slice_rows", (x,), back)


def slice_cols(x: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] of {x.shape}")

    def back(g):
        x.grad[:, start:stop] += g

    return x.tape._record(x.value[:, start:stop].copy(), "slice_cols", (x,), back)


def reshape(x: Node, rows: int, cols: int) -> Node:
    if rows * cols != x.value.size:
        raise DimensionError(f"reshape: {x.shape} -> ({rows}, {cols})")
    shape = x.shape

    def back(g):
        x.grad += g.reshape(shape)

    return x.tape._record(x.value.reshape(rows, cols).copy(), "reshape", (x,), back)


def mean_over(xs: Iterable[Node]) -> Node:
    xs = tuple(xs)
    if not xs:
        raise DimensionError("mean_over: empty set")
    for x in xs[1:]:
        _same_shape("mean_over", xs[0], x)
    k = len(xs)
    value = xs[0].value.copy()
    for x in xs[1:]:
        value = value + x.value
    value = value / k

    def back(g):
        for x in xs:
            x.grad += g / k

    return _tape_of(*xs)._record(value, "mean_over", xs, back)


def sum_all(x: Node) -> Node:
    def back(g):
        x.grad += g[0, 0]

    return x.tape._record(np.array([[x.value.sum()]]), "sum_all", (x,), back)


def row_sum(x: Node) -> Node:
    def back(g):
        x.grad += g

    return x.tape._record(x.value.sum(axis=1, keepdims=True), "row_sum", (x,), back)


def gather_rows(x: Node, index: np.ndarray) -> Node:
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        if not len(index):
            return
        # stable sort + reduceat: fixed summation order and much faster than np.add.at
        order = np.argsort(index, kind="stable")
        starts, rows = _segment_starts(index[order])
        x.grad[rows] += np.add.reduceat(g[order], starts, axis=0)

    return x.tape._record(x.value[index], "gather_rows", (x,), back)


def segment_sum(x: Node, segment: np.ndarray, n_segments: int) -> Node:
    """Sum rows of ``x`` into ``n_segments`` buckets; empty buckets are zero rows.

    ``segment`` must be sorted ascending so that reduction order is fixed.
    """
    segment = np.asarray(segment, dtype=np.intp)
    if segment.shape != (x.shape[0],):
        raise DimensionError(f"segment_sum: {segment.shape} ids for {x.shape}")
    out = np.zeros((n_segments, x.shape[1]))
    if len(segment):
        starts, present = _segment_starts(segment)
        out[present] = np.add.reduceat(x.value, starts, axis=0)

    def back(g):
        x.grad += g[segment]

    return x.tape._record(out, "segment_sum", (x,), back)


def _segment_starts(segment: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if np.any(np.diff(segment) < 0):
        raise ValueError("segment ids must be sorted")
    starts = np.flatnonzero(np.r_[True, segment[1:] != segment[:-1]])
    return starts, segment[starts]


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)

    def back(g):
        x.grad += g * out * (1.0 - out)

    return x.tape._record(out, "sigmoid", (x,), back)


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)

    def back(g):
        x.grad += g * (1.0 - out * out)

    return x.tape._record(out, "tanh", (x,), back)


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    # subgradient at exactly 0 is taken from the positive branch
    factor = np.where(x.value >= 0, 1.0, slope)

    def back(g):
        x.grad += g * factor

    return x.tape._record(x.value * factor, "leaky_relu", (x,), back)


def log(x: Node) -> Node:
    if np.any(x.value <= 0):
        raise NumericError("log of non-positive value")

    def back(g):
        x.grad += g / x.value

    return x.tape._record(np.log(x.value), "log", (x,), back)


def softplus(x: Node) -> Node:
    """log(1 + exp(x)), computed without overflow."""
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.exp(-np.logaddexp(0.0, -v))

    def back(g):
        x.grad += g * sig

    return x.tape._record(out, "softplus", (x,), back)


def square(x: Node) -> Node:
    def back(g):
        x.grad += 2.0 * g * x.value

    return x.tape._record(x.value * x.value, "square", (x,), back)


# ---------------------------------------------------------------------------
# softmax variants


def softmax_rows(x: Node, additive_mask: np.ndarray | None = None) -> Node:
    """Row-wise softmax of ``x + additive_mask``.

    Mask entries are 0 (keep) or :data:`NEG_SENTINEL` (drop); dropped entries
    come out as exactly 0. A row with nothing kept raises
    :class:`DegenerateRowError`.
    """
    if additive_mask is None:
        keep = np.ones(x.shape, dtype=bool)
        z = x.value
    else:
        additive_mask = np.asarray(additive_mask, dtype=np.float64)
        if additive_mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask {additive_mask.shape} for {x.shape}")
        keep = additive_mask > NEG_SENTINEL / 2
        z = np.where(keep, x.value + additive_mask, NEG_SENTINEL)
    if not np.all(keep.any(axis=1)):
        bad = np.flatnonzero(~keep.any(axis=1))
        raise DegenerateRowError(f"softmax_rows: fully masked rows {bad.tolist()}")
    z = z - np.max(np.where(keep, z, -np.inf), axis=1, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, z, 0.0)), 0.0)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        x.grad += out * (g - np.sum(g * out, axis=1, keepdims=True))

    return x.tape._record(out, "softmax_rows", (x,), back)


def segment_softmax(x: Node, segment: np.ndarray, n_segments: int) -> Node:
    """Softmax of an n x 1 score column within each (sorted) segment."""
    segment = np.asarray(segment, dtype=np.intp)
    if x.shape != (len(segment), 1):
        raise DimensionError(f"segment_softmax: scores {x.shape}, {len(segment)} ids")
    v = x.value[:, 0]
    if len(segment):
        starts, present = _segment_starts(segment)
        seg_max = np.full(n_segments, -np.inf)
        seg_max[present] = np.maximum.reduceat(v, starts)
        e = np.exp(v - seg_max[segment])
        seg_tot = np.zeros(n_segments)
        seg_tot[present] = np.add.reduceat(e, starts)
        out = (e / seg_tot[segment])[:, None]
    else:
        starts = present = np.zeros(0, dtype=np.intp)
        out = np.zeros((0, 1))

    def back(g):
        if not len(segment):
            return
        gy = (g * out)[:, 0]
        tot = np.zeros(n_segments)
        tot[present] = np.add.reduceat(gy, starts)
        x.grad += out * (g - tot[segment][:, None])

    return x.tape._record(out, "segment_softmax", (x,), back)


# ---------------------------------------------------------------------------
# driving the tape


def backward(tape: Tape, loss: Node) -> None:
    """Populate ``grad`` of every node on ``tape`` with d(loss)/d(node)."""
    if loss.shape != (1, 1):
        raise DimensionError(f"backward: loss must be 1x1, got {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss is not on this tape")
    tape.zero_grad()
    loss.grad[0, 0] = 1.0
    idx = len(tape.nodes) - 1
    while tape.nodes[idx] is not loss:
        idx -= 1
    for node in reversed(tape.nodes[: idx + 1]):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
