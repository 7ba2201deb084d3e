"""Minimal reverse-mode automatic differentiation over real matrices.

Values are float64 arrays whose last two axes are (rows, cols). A leading
batch axis is allowed so that a whole minibatch of independent sequences can
share one tape; primitives broadcast only across those leading axes.

Usage::

    tape = Tape()
    x = tape.leaf(np.ones((2, 3)))
    out = mean_sq(x)
    grads = tape.backward(out)
    grads[x]
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim < 2:
            raise ShapeError(f"tensor needs at least 2 dims, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, c: float):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"


class Grads:
    """Gradients from one backward pass, indexed by tensor."""

    def __init__(self, grads: list, tape: "Tape"):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self._tape:
            return np.zeros_like(t.value)
        g = self._grads[t.node]
        return np.zeros_like(t.value) if g is None else g


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.parents: list[tuple[int | None, ...]] = []
        self.vjps: list[Callable | None] = []

    def __len__(self) -> int:
        return len(self.parents)

    def leaf(self, value) -> Tensor:
        self.parents.append(())
        self.vjps.append(None)
        return Tensor(value, self, len(self.parents) - 1)

    def _record(self, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        self.parents.append(tuple(t.node if t.tape is self else None for t in inputs))
        self.vjps.append(vjp)
        return Tensor(value, self, len(self.parents) - 1)

    def backward(self, out: Tensor) -> Grads:
        if out.value.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 output, got {out.value.shape}")
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: list = [None] * len(self.parents)
        grads[out.node] = np.ones((1, 1))
        for node in range(out.node, -1, -1):
            g = grads[node]
            vjp = self.vjps[node]
            if g is None or vjp is None:
                continue
            parents = self.parents[node]
            for parent, pg in zip(parents, vjp(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        return Grads(grads, self)


def _tape_of(*ts: Tensor) -> Tape | None:
    for t in ts:
        if t.tape is not None and t.node is not None:
            return t.tape
    return None


def _emit(value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(value, inputs, vjp)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lead_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(s[:-2] for s in shapes))
    except ValueError:
        raise ShapeError(f"{op}: incompatible batch shapes {shapes}") from None


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    _lead_shape("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array broadcastable to ``a``."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    try:
        out = a.value * c
    except ValueError:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} do not broadcast") from None
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant {c.shape} would change shape {a.shape}")
    return _emit(out, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def _concat(op: str, parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    other = -1 if axis == -2 else -2
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"{op}: mismatched shapes {[p.shape for p in parts]}")
    lead = _lead_shape(op, *(p.shape for p in parts))
    vals = [np.broadcast_to(p.value, lead + p.shape[-2:]) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    shapes = [p.shape for p in parts]
    out = np.concatenate(vals, axis=axis)

    def vjp(g):
        bounds = np.cumsum(sizes)[:-1]
        pieces = np.split(g, bounds, axis=axis)
        return tuple(_unbroadcast(piece, s) for piece, s in zip(pieces, shapes))

    return _emit(out, parts, vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_rows", parts, -2)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat("concat_cols", parts, -1)


def slice_row(a: Tensor, i: int) -> Tensor:
    a = _as_tensor(a)
    rows = a.shape[-2]
    if not -rows <= i < rows:
        raise ShapeError(f"slice_row: row {i} out of range for shape {a.shape}")
    i = i % rows
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., i : i + 1, :] = g
        return (full,)

    return _emit(a.value[..., i : i + 1, :].copy(), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    on = a.value > 0
    return _emit(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,))


def masked_softmax_rows(x: Tensor, mask) -> Tensor:
    """Softmax along the last axis, with masked-out entries fixed at exactly 0.

    ``mask`` is boolean and broadcastable to ``x``; a row with nothing
    unmasked yields zeros.
    """
    x = _as_tensor(x)
    shape = x.shape
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs input {shape}") from None
    flat = x.value.reshape((-1,) + shape[-2:])
    s = kernels.masked_softmax_fwd(flat, mask.reshape(flat.shape))

    def vjp(g):
        return (kernels.masked_softmax_bwd(s, g.reshape(s.shape)).reshape(shape),)

    return _emit(s.reshape(shape), (x,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a (V, M) table; output shape is ids.shape + (M,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding_lookup: id out of range for table with {n} rows")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.value[ids], (table,), vjp)


def mean_sq(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size
    av = a.value
    return _emit(np.array([[np.mean(av * av)]]), (a,), lambda g: (g[0, 0] * 2.0 / n * av,))


def total(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


# ------------------------------------------------------------- verification


def grad_check(f: Callable[..., Tensor], point, eps: float = 1e-5, atol: float = 1e-7) -> float:
    """Largest relative gap between backward() and central finite differences.

    ``f`` receives one tensor per array in ``point`` and must return a 1x1
    tensor. The per-coordinate error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]
    tape = Tape()
    leaves = [tape.leaf(a.copy()) for a in arrays]
    grads = tape.backward(f(*leaves))
    worst = 0.0
    for j, a in enumerate(arrays):
        analytic = grads[leaves[j]]
        for idx in np.ndindex(a.shape):
            vals = []
            for step in (eps, -eps):
                moved = [x.copy() for x in arrays]
                moved[j][idx] += step
                vals.append(f(*[Tensor(m) for m in moved]).value[0, 0])
            numeric = (vals[0] - vals[1]) / (2 * eps)
            an = analytic[idx]
            err = abs(an - numeric) / max(abs(an), abs(numeric), atol)
            worst = max(worst, err)
    return worst
