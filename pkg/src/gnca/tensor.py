"""Reverse-mode automatic differentiation over dense float64 arrays.

A deliberately small tape engine: just the primitives needed for the MLPs,
the equivariant graph convolution, and the training losses in this package.
Everything is double precision, shapes are checked eagerly, and any primitive
that produces a NaN/Inf raises immediately instead of letting a recurrent
rollout fail silently many steps later.

Gradients are recorded on an explicit :class:`Tape`:

    with Tape() as tape:
        y = linear(x, w, b)
        loss = mean(square(y))
        tape.backward(loss)
    # w.grad, b.grad now hold dloss/dparam

Without an active tape all operations are pure forward computations, which
makes frozen-parameter evaluation safe to run from several threads at once.
Tape construction and backward are single-threaded by design.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A primitive produced or received a NaN/Inf value."""


class TapeError(RuntimeError):
    """Backward called on a stale, foreign, or already-consumed tape."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite result in '{op}'")
    return arr


class Tensor:
    """Dense float64 array plus an optional gradient accumulator.

    ``grad`` is lazily allocated (same shape as ``values``) the first time a
    backward pass reaches this tensor; it accumulates additively across
    backward calls until :func:`zero_grads` resets it.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim > 2:
            raise ValueError(f"rank-{arr.ndim} tensors are not supported")
        _check_finite(arr, "tensor")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the values with no grad tracking."""
        return Tensor(self.values, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; the free functions are the canonical API.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Operands are always recorded before their consumers, so visiting the
    records in exact reverse order implements reverse-mode differentiation.
    A tape can run backward once; reuse raises :class:`TapeError`.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))
        self._outputs.add(id(out))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate dloss/dx into every requires_grad tensor below ``loss``."""
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if loss.values.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced on this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.values)
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_result(
    values: np.ndarray,
    op: str,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[Tensor, np.ndarray], None] | None,
) -> Tensor:
    _check_finite(values, op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad and backward_fn is not None:
        tape._record(out, lambda g, _out=out: backward_fn(_out, g))
    return out


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# broadcasting helpers (restricted: rank <= 2, extents equal or 1)


def _broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b:
        return
    if len(a) != len(b):
        raise ValueError(f"{op}: rank mismatch {a} vs {b}")
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible shapes {a} vs {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (dg, ds) in enumerate(zip(grad.shape, shape)) if ds == 1 and dg != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "add")

    def backward(out, g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make_result(a.values + b.values, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "sub")

    def backward(out, g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make_result(a.values - b.values, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "mul")
    av, bv = a.values, b.values

    def backward(out, g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * av, b.shape))

    return _make_result(av * bv, "mul", (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "div")
    av, bv = a.values, b.values

    def backward(out, g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / bv, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * av / (bv * bv), b.shape))

    return _make_result(av / bv, "div", (a, b), backward)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _make_result(x.values * c, "scalar_mul", (x,), backward)


def square(x: Tensor) -> Tensor:
    xv = x.values

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * (2.0 * xv))

    return _make_result(xv * xv, "square", (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise ValueError("sqrt of negative value")
    out_v = np.sqrt(x.values)

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * (0.5 / out.values))

    return _make_result(out_v, "sqrt", (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_v = np.tanh(x.values)

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out.values * out.values))

    return _make_result(out_v, "tanh", (x,), backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Overflow-free logistic: handle the two sign branches separately.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out_v = _sigmoid_values(x.values)

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * out.values * (1.0 - out.values))

    return _make_result(out_v, "sigmoid", (x,), backward)


def softplus(x: Tensor) -> Tensor:
    xv = x.values
    out_v = np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid_values(xv))

    return _make_result(out_v, "softplus", (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise ValueError("log of non-positive value")
    xv = x.values

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g / xv)

    return _make_result(np.log(xv), "log", (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    xv = x.values
    mask = (xv >= lo) & (xv <= hi)

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make_result(np.clip(xv, lo, hi), "clip", (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(out, g):
        if a.requires_grad:
            a._accumulate(g @ bv.T)
        if b.requires_grad:
            b._accumulate(av.T @ g)

    return _make_result(av @ bv, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out), ``b`` (1, out)."""
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b.values.shape != (1, w.shape[1]):
        raise ValueError(f"linear: bias shape {b.shape} != (1, {w.shape[1]})")
    xv, wv = x.values, w.values

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(g @ wv.T)
        if w.requires_grad:
            w._accumulate(xv.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True))

    return _make_result(xv @ wv + b.values, "linear", (x, w, b), backward)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(out, g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.full_like(x.values, float(g.reshape(-1)[0])))
        else:
            x._accumulate(np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.values.shape).copy())

    v = x.values.sum(axis=axis, keepdims=keepdims)
    if axis is None and not keepdims:
        v = np.asarray(v).reshape(())
    return _make_result(v, "sum", (x,), backward)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return scalar_mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def row_norm(x: Tensor) -> Tensor:
    """Per-row Euclidean norm (n, d) -> (n, 1); zero rows get zero gradient."""
    if x.values.ndim != 2:
        raise ValueError(f"row_norm expects a matrix, got shape {x.shape}")
    xv = x.values
    norms = np.sqrt((xv * xv).sum(axis=1, keepdims=True))

    def backward(out, g):
        if x.requires_grad:
            safe = np.where(norms > 0, norms, 1.0)
            x._accumulate(g * xv / safe)

    return _make_result(norms, "row_norm", (x,), backward)


def _scatter_add_rows(idx: np.ndarray, rows: np.ndarray, n_out: int) -> np.ndarray:
    """Row scatter-add in ascending input order (deterministic).

    Equivalent to np.add.at on a zero matrix; per-column bincount is much
    faster and accumulates in the same sequential order.
    """
    out = np.empty((n_out, rows.shape[1]))
    for c in range(rows.shape[1]):
        out[:, c] = np.bincount(idx, weights=rows[:, c], minlength=n_out)
    return out


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``x[index]``; the adjoint scatter-adds back by row."""
    idx = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2:
        raise ValueError(f"take_rows expects a matrix, got shape {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("take_rows: index out of range")

    def backward(out, g):
        if x.requires_grad:
            x._accumulate(_scatter_add_rows(idx, g, x.shape[0]))

    return _make_result(x.values[idx], "take_rows", (x,), backward)


def segment_sum(values: Tensor, index: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``index``.

    Accumulation follows ascending row order (np.add.at is sequential), so
    results are bit-reproducible; empty segments are zero rows.
    """
    idx = np.asarray(index, dtype=np.int64)
    if values.values.ndim != 2:
        raise ValueError(f"segment_sum expects a matrix, got shape {values.shape}")
    if idx.shape != (values.shape[0],):
        raise ValueError("segment_sum: index length must equal row count")
    if idx.size and (idx.min() < 0 or idx.max() >= n_segments):
        raise IndexError("segment_sum: segment index out of range")
    out_v = _scatter_add_rows(idx, values.values, n_segments)

    def backward(out, g):
        if values.requires_grad:
            values._accumulate(g[idx])

    return _make_result(out_v, "segment_sum", (values,), backward)


def segment_mean(values: Tensor, index: np.ndarray, n_segments: int) -> Tensor:
    """Segment average; an empty segment yields a zero row (not NaN)."""
    idx = np.asarray(index, dtype=np.int64)
    total = segment_sum(values, idx, n_segments)
    counts = np.bincount(idx, minlength=n_segments).astype(np.float64)
    inv = np.where(counts > 0, 1.0 / np.where(counts > 0, counts, 1.0), 0.0)
    return mul(total, Tensor(inv[:, None]))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate matrices along rows (axis=0) or columns (axis=1)."""
    if axis not in (0, 1):
        raise ValueError("concat: axis must be 0 or 1")
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of no tensors")
    for t in ts:
        if t.values.ndim != 2:
            raise ValueError("concat expects matrices")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(out, g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make_result(np.concatenate([t.values for t in ts], axis=axis), "concat", ts, backward)


# ---------------------------------------------------------------------------
# verification


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic map from ``x`` to a scalar tensor. The
    error metric per coordinate is |analytic - fd| / max(1, |analytic|).
    When ``max_coords`` is given, a deterministic random subset of
    coordinates is probed (useful for expensive rollout losses).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.values.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    analytic_flat = analytic.reshape(-1)

    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        hi = f(x).item()
        flat[c] = orig - eps
        lo = f(x).item()
        flat[c] = orig
        fd = (hi - lo) / (2.0 * eps)
        err = abs(analytic_flat[c] - fd) / max(1.0, abs(analytic_flat[c]))
        worst = max(worst, err)
    return worst
