"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside a tape every op is a plain
numpy computation, which is what decoding uses.

    with Tape() as tape:
        loss = sum_(tanh(matmul(x, w)))
    tape.backward(loss)      # fills w.grad
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericalError",
    "backward",
    "matmul",
    "row_stable",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "tanh",
    "sigmoid",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "slice_",
    "gather_rows",
    "sum_",
    "mean",
    "clip_global_norm",
]


class NumericalError(ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        """A constant view of the same values; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in tensor {self.name or tuple(self.shape)}")
        return self

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    grad_fn: Callable[[np.ndarray], tuple]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of primitive applications.

    A tape is owned by one thread at a time: recording and the backward sweep
    both mutate it. Records are appended in execution order, so the list is
    already topologically sorted.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, op, inputs, out, grad_fn) -> None:
        out.requires_grad = True
        self.records.append(_Record(op, inputs, out, grad_fn))
        self._produced.add(id(out))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        """Write d(loss)/d(leaf) into ``leaf.grad`` for every leaf on this tape.

        Existing leaf gradients are overwritten, so sweeping twice yields the
        same buffers. Leaves with no path to ``loss`` get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.grad_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                store = grads if key in self._produced else leaf_grads
                prev = store.get(key)
                store[key] = gi if prev is None else prev + gi
        for leaf in self.leaves():
            g = leaf_grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor, grad_fn) -> Tensor:
    if _ACTIVE and any(t.requires_grad for t in inputs):
        _ACTIVE[-1]._push(op, inputs, out, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


_ROW_STABLE = contextvars.ContextVar("row_stable", default=False)


@contextmanager
def row_stable():
    """Make every row of a matrix product independent of the other rows.

    BLAS picks different kernels for different batch sizes, so the same row
    can come out a few ulps apart depending on what it was batched with.
    Search code runs under this mode so that a hypothesis' score does not
    depend on the beam width. Usable as a decorator.
    """
    token = _ROW_STABLE.set(True)
    try:
        yield
    finally:
        _ROW_STABLE.reset(token)


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if _ROW_STABLE.get():
        out = Tensor(np.einsum("...i,ij->...j", a.data, b.data))
    else:
        out = Tensor(a.data @ b.data)

    def grad_fn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", (a, b), out, grad_fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", (a,), Tensor(a.data.T), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _record("reshape", (a,), Tensor(a.data.reshape(shape)), lambda g: (g.reshape(src),))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", (a,), Tensor(y), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # tanh form never overflows
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record("sigmoid", (a,), Tensor(y), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericalError("log of a non-positive value")
    return _record("log", (a,), Tensor(np.log(a.data)), lambda g: (g / a.data,))


def _check_distribution_input(a: Tensor, op: str) -> None:
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise ValueError(f"{op} of an empty vector")
    if not np.all(np.isfinite(a.data)):
        raise NumericalError(f"{op} input contains non-finite values")


def softmax(a, axis: int = -1) -> Tensor:
    """Normalised exponentials along ``axis`` (max-subtracted)."""
    a = _as_tensor(a)
    _check_distribution_input(a, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), Tensor(y), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_distribution_input(a, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), Tensor(y), grad_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of nothing")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", ts, out, grad_fn)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 3))``."""
    a = _as_tensor(a)
    out = Tensor(a.data[index])

    def grad_fn(g):
        z = np.zeros_like(a.data)
        z[index] = g
        return (z,)

    return _record("slice", (a,), out, grad_fn)


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` may have any integer shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise IndexError(f"token id {int(bad.reshape(-1)[0])} out of range for table with {n} rows")
    out = Tensor(table.data[ids])

    def grad_fn(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (z,)

    return _record("gather_rows", (table,), out, grad_fn)


def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, grad_fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), out, grad_fn)


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads))


def clip_global_norm(grads, max_norm: float):
    """Rescale gradients so their joint L2 norm is at most ``max_norm``.

    ``grads`` is a mapping of name -> array or a plain sequence of arrays;
    the result has the same form. Returns ``(clipped, original_norm)``.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    named = isinstance(grads, Mapping)
    items = list(grads.items()) if named else list(enumerate(grads))
    for key, g in items:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {key!r}")
    norm = global_norm([g for _, g in items])
    if norm > max_norm:
        scale = max_norm / norm
        items = [(k, g * scale) for k, g in items]
    if named:
        return dict(items), norm
    return [g for _, g in items], norm
