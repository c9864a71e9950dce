"""Dense tensors with reverse-mode differentiation.

The graph is implicit: every tensor produced by an op keeps references to its
inputs, a VJP closure, and a monotonically increasing creation number. Backward
walks the tensors reachable from the loss in decreasing creation order, which
is exactly reverse forward order, and visits each node once. VJP closures are
written in terms of the public ops, so the gradients returned by ``backward``
are themselves graph tensors and can be differentiated again (needed for
hypergradients through unrolled update steps).

Supported broadcasting is numpy-style but intended only for the row/scalar
cases (reductions with keepdims, bias rows, scalar coefficients).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "tensor",
    "constant",
    "detach",
    "barrier",
    "barrier_transparent",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "matmul_nt",
    "matmul_tn",
    "transpose",
    "reshape",
    "power",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "maximum_const",
    "tsum",
    "tmean",
    "dot",
    "concat",
    "gather_rows",
    "take_rows",
    "select_columns",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "backward",
    "finite_diff_grad",
]

_seq_counter = itertools.count(1)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Raised on invalid differentiation requests (non-scalar backward etc.)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_seq", "_inputs", "_vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        elif arr.dtype.kind != "f":
            raise TypeError(f"tensor data must be numeric, got dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._seq = next(_seq_counter)
        self._inputs: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], Sequence[tuple["Tensor", "Tensor"]]] | None = None
        self.op: str | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{grad}{op})"

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _slice(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _fail_item(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor outside the graph; gradients never flow through."""
    return t.detach()


_barrier_transparent = False


@contextmanager
def barrier_transparent():
    """Make gradient barriers pass-through for the enclosed backward sweeps.

    Used by the meta loop's final hypergradient pass: the unrolled inner
    updates are exact functions of the parameters, so differentiation through
    them must see how stop-gradient values (soft-label teachers, matching
    inputs) drift across inner iterates, even though each inner gradient
    itself treats them as constants.
    """
    global _barrier_transparent
    prev = _barrier_transparent
    _barrier_transparent = True
    try:
        yield
    finally:
        _barrier_transparent = prev


def barrier(x: Tensor) -> Tensor:
    """Identity whose gradient is blocked except under ``barrier_transparent``."""

    def vjp(g):
        if _barrier_transparent:
            return ((x, g),)
        return ()

    return _node(x.data, "barrier", (x,), vjp)


def _raw(data: np.ndarray) -> Tensor:
    """Construct without validation; callers guarantee float ndarray data."""
    t = object.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t._seq = next(_seq_counter)
    t._inputs = ()
    t._vjp = None
    t.op = None
    return t


def _node(data, op: str, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = _raw(data)
    for t in inputs:
        if t.requires_grad:
            out.requires_grad = True
            out._inputs = inputs
            out._vjp = vjp
            out.op = op
            break
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or not sa or not sb:
        return
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None


# -- broadcasting helper -------------------------------------------------------

def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- arithmetic ------------------------------------------------------------------
# vjps build gradient subgraphs only for the operands that require them

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to(g, a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to(g, b.shape)))
        return out

    return _node(a.data + b.data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to(g, a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to(neg(g), b.shape)))
        return out

    return _node(a.data - b.data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to(mul(g, b), a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to(mul(g, a), b.shape)))
        return out

    return _node(a.data * b.data, "mul", (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, _sum_to(div(g, b), a.shape)))
        if b.requires_grad:
            out.append((b, _sum_to(neg(mul(g, div(a, mul(b, b)))), b.shape)))
        return out

    return _node(a.data / b.data, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, neg(g)),)

    return _node(-a.data, "neg", (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g):
        return ((a, mul(g, mul(constant(np.asarray(p)), power(a, p - 1.0)))),)

    return _node(a.data**p, "pow", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    if a.requires_grad:
        out.requires_grad = True
        out._inputs = (a,)
        out.op = "exp"

        def vjp(g):
            return ((a, mul(g, out)),)

        out._vjp = vjp
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, div(g, a)),)

    return _node(np.log(a.data), "log", (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def relu(a: Tensor) -> Tensor:
    # gradient at exactly 0 is 0 (subgradient choice; keeps tests deterministic)
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(g):
        return ((a, mul(g, constant(mask))),)

    return _node(np.maximum(a.data, 0), "relu", (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        negv = 1.0 - pos
    out = Tensor(np.where(a.data >= 0, pos, negv))
    if a.requires_grad:
        out.requires_grad = True
        out._inputs = (a,)
        out.op = "sigmoid"
        ones = np.ones_like(out.data)

        def vjp(g):
            return ((a, mul(g, mul(out, sub(constant(ones), out)))),)

        out._vjp = vjp
    return out


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient passes where a > floor."""
    mask = (a.data > floor).astype(a.data.dtype)

    def vjp(g):
        return ((a, mul(g, constant(mask))),)

    return _node(np.maximum(a.data, floor), "maximum_const", (a,), vjp)


# -- reductions -------------------------------------------------------------------

def _expand_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast to a larger shape; adjoint of summing over broadcast axes."""

    def vjp(g2):
        return ((g, _sum_to(g2, g.shape)),)

    data = np.broadcast_to(g.data, shape)
    return _node(np.ascontiguousarray(data), "expand", (g,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kept = list(a.shape)
            for ax in axes:
                kept[ax % a.ndim] = 1
            gd = reshape(gd, tuple(kept))
        return ((a, _expand_to(gd, a.shape)),)

    return _node(out_data, "sum", (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(np.asarray(1.0 / count)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal-length 1-d tensors, got {a.shape} and {b.shape}")

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, mul(g, b)))
        if b.requires_grad:
            out.append((b, mul(g, a)))
        return out

    return _node(np.asarray(a.data @ b.data), "dot", (a, b), vjp)


# -- linear algebra / layout -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, matmul_nt(g, b)))
        if b.requires_grad:
            out.append((b, matmul_tn(a, g)))
        return out

    return _node(a.data @ b.data, "matmul", (a, b), vjp)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, matmul(g, b)))
        if b.requires_grad:
            out.append((b, matmul_tn(g, a)))
        return out

    return _node(a.data @ b.data.T, "matmul_nt", (a, b), vjp)


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """a.T @ b without materializing the transpose."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        out = []
        if a.requires_grad:
            out.append((a, matmul_nt(b, g)))
        if b.requires_grad:
            out.append((b, matmul(a, g)))
        return out

    return _node(a.data.T @ b.data, "matmul_tn", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d tensor, got shape {a.shape}")

    def vjp(g):
        return ((a, transpose(g)),)

    return _node(a.data.T.copy(), "transpose", (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def vjp(g):
        return ((a, reshape(g, a.shape)),)

    return _node(a.data.reshape(shape), "reshape", (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def vjp(g):
        grads = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if not p.requires_grad:
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(start), int(stop))
            grads.append((p, _slice(g, tuple(key))))
        return grads

    return _node(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, vjp)


def _slice(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def vjp(g):
        return ((a, _unslice(g, key, a.shape)),)

    return _node(np.ascontiguousarray(out_data), "slice", (a,), vjp)


def _unslice(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``_slice``: embed g into zeros of the original shape."""

    def vjp(g2):
        return ((g, _slice(g2, key)),)

    data = np.zeros(shape, dtype=g.data.dtype)
    data[key] = g.data
    return _node(data, "unslice", (g,), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[i, j] = a[i, index[i, j]] for a 2-d tensor and integer index matrix."""
    index = np.asarray(index)
    if a.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: got tensor {a.shape}, index {index.shape}")
    rows = np.arange(a.shape[0])[:, None]

    def vjp(g):
        return ((a, _scatter_rows(g, index, a.shape)),)

    return _node(a.data[rows, index], "gather_rows", (a,), vjp)


def _scatter_rows(g: Tensor, index: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    rows = np.arange(shape[0])[:, None]

    def vjp(g2):
        return ((g, gather_rows(g2, index)),)

    data = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(data, (np.broadcast_to(rows, index.shape), index), g.data)
    return _node(data, "scatter_rows", (g,), vjp)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Row gather: out = a[index] for a 1-d integer index."""
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"take_rows: index must be 1-d, got {index.shape}")

    def vjp(g):
        return ((a, _untake_rows(g, index, a.shape)),)

    return _node(a.data[index], "take_rows", (a,), vjp)


def _untake_rows(g: Tensor, index: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    def vjp(g2):
        return ((g, take_rows(g2, index)),)

    data = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(data, index, g.data)
    return _node(data, "untake_rows", (g,), vjp)


def select_columns(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-d tensor; used for label lookups."""
    cols = np.asarray(cols)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"select_columns: got tensor {a.shape}, cols {cols.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        return ((a, _put_columns(g, cols, a.shape)),)

    return _node(a.data[rows, cols], "select_columns", (a,), vjp)


def _put_columns(g: Tensor, cols: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    rows = np.arange(shape[0])

    def vjp(g2):
        return ((g, select_columns(g2, cols)),)

    data = np.zeros(shape, dtype=g.data.dtype)
    np.add.at(data, (rows, cols), g.data)
    return _node(data, "put_columns", (g,), vjp)


# -- composites ----------------------------------------------------------------------

def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, via max-shifted log-sum-exp.

    The row max is treated as a constant shift; softmax is invariant to it, so
    gradients are unaffected while overflow is avoided.
    """
    shift = constant(a.data.max(axis=-1, keepdims=True))
    centered = sub(a, shift)
    lse = log(tsum(exp(centered), axis=-1, keepdims=True))
    return sub(centered, lse)


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def l2_normalize(a: Tensor, eps: float = 1e-24) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    sq = tsum(mul(a, a), axis=-1, keepdims=True)
    return div(a, sqrt(add(sq, constant(np.asarray(eps)))))


# -- differentiation ------------------------------------------------------------------

def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep from a scalar.

    Returns gradients keyed by tensor identity for every requires-grad leaf
    reachable from ``loss`` (an all-detached loss yields an empty map). Pass
    ``wrt`` to instead collect adjoints of exactly those tensors, which may be
    non-leaf intermediates (used by the unrolled meta-optimization). Returned
    gradients are graph tensors, so a second backward over them gives
    second-order derivatives.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    wanted = None if wrt is None else {id(t): t for t in wrt}

    # reachable grad-requiring subgraph, iteratively (graphs can be deep)
    seen: set[int] = {id(loss)}
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for parent in t._inputs:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, Tensor] = {id(loss): constant(np.ones_like(loss.data))}
    out: dict[Tensor, Tensor] = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if wanted is not None and id(t) in wanted:
            out[wanted[id(t)]] = g
        elif wanted is None and t._vjp is None:
            out[t] = g
        if t._vjp is None:
            continue
        for parent, pg in t._vjp(g):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else add(prev, pg)
    return out


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    base = x.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += h
        hi = float(f(Tensor(probe.reshape(base.shape))).data)
        probe[i] -= 2 * h
        lo = float(f(Tensor(probe.reshape(base.shape))).data)
        flat[i] = (hi - lo) / (2 * h)
    return grad


def grad_or_zeros(grads: Mapping[Tensor, Tensor], t: Tensor) -> np.ndarray:
    """Gradient array for ``t``, zeros when the loss does not reach it."""
    g = grads.get(t)
    return np.zeros_like(t.data) if g is None else g.data
