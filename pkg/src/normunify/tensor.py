"""Deterministic dense tensor arithmetic.

Tensors are plain numpy arrays restricted to float32/float64 and rank 1-3.
Every reduction is evaluated strictly left-to-right over its axis (through
``np.cumsum``, whose accumulate semantics fix the order), so repeated runs
are bit-identical regardless of BLAS or SIMD choices.

Each op also reports its scalar operation count to the active
:class:`OpCounter`, which is how the benchmark harness gets exact,
machine-independent flop counts.
"""

from __future__ import annotations

import contextvars
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.special import erf

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
MAX_RANK = 3
# above this many products, matmul accumulates with an explicit k-loop
_CUMSUM_LIMIT = 8192


class TensorError(ValueError):
    """Shape, dtype or range violation in a tensor op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


# ---------------------------------------------------------------------------
# op counting


@dataclass
class OpCounter:
    """Accumulates scalar op counts by kind, globally and per named scope."""

    counts: Counter = field(default_factory=Counter)
    scopes: dict[str, Counter] = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.counts.values())

    def scope_total(self, name: str) -> int:
        return sum(self.scopes.get(name, Counter()).values())


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "normunify_counter", default=None
)
_scope: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar(
    "normunify_scope", default=()
)


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextmanager
def op_scope(name: str) -> Iterator[None]:
    """Attribute ops recorded inside the block to ``name`` as well."""
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def _record(**kinds: int) -> None:
    counter = _counter.get()
    if counter is None:
        return
    kinds = {k: int(v) for k, v in kinds.items() if v}
    counter.counts.update(kinds)
    for name in _scope.get():
        counter.scopes.setdefault(name, Counter()).update(kinds)


# ---------------------------------------------------------------------------
# validation


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Copy ``data`` into a fresh, read-only tensor of the given dtype."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    _check(arr)
    return _finish(arr)


def _check(x: np.ndarray, name: str = "x") -> None:
    if not isinstance(x, np.ndarray):
        raise TensorError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.dtype not in DTYPES:
        raise TensorError(f"{name}: dtype {x.dtype} not in (float32, float64)")
    if not 1 <= x.ndim <= MAX_RANK:
        raise TensorError(f"{name}: rank {x.ndim} outside 1..{MAX_RANK}")


def _same_dtype(a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise TensorError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _finish(out: np.ndarray) -> np.ndarray:
    # one reduction; the exact check only runs if the cheap sum is not finite
    if not math.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NonFiniteError("non-finite value in tensor result")
    out.flags.writeable = False
    return out


def _operand(x, like: np.ndarray):
    """Python scalars pass through (numpy keeps them weakly typed)."""
    if isinstance(x, (int, float)):
        return x
    _check(x)
    _same_dtype(x, like)
    return x


def _elementwise(ufunc, a, b) -> np.ndarray:
    try:
        # non-finite results are reported by _finish, not as warnings
        with np.errstate(all="ignore"):
            return ufunc(a, b)
    except ValueError as exc:
        raise TensorError(f"incompatible shapes {np.shape(a)} and {np.shape(b)}") from exc


# ---------------------------------------------------------------------------
# reductions


def seq_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Left-to-right sum along ``axis`` (no pairwise/SIMD reassociation)."""
    _check(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise TensorError("sum over empty axis")
    out = np.take(np.cumsum(x, axis=axis), [n - 1], axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)
        if out.ndim == 0:
            out = out.reshape(1)
    _record(adds=(n - 1) * (x.size // n))
    return _finish(np.ascontiguousarray(out))


def row_sum(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    return seq_sum(x, axis=-1, keepdims=keepdims)


def row_mean(x: np.ndarray, keepdims: bool = False) -> np.ndarray:
    """Arithmetic mean over the last dimension."""
    _check(x)
    d = x.shape[-1]
    if d == 0:
        raise TensorError("row_mean over empty last dimension")
    return div(row_sum(x, keepdims=keepdims), d)


# ---------------------------------------------------------------------------
# elementwise


def add(a: np.ndarray, b) -> np.ndarray:
    _check(a, "a")
    b = _operand(b, a)
    out = _elementwise(np.add, a, b)
    _record(adds=out.size)
    return _finish(out)


def sub(a: np.ndarray, b) -> np.ndarray:
    _check(a, "a")
    b = _operand(b, a)
    out = _elementwise(np.subtract, a, b)
    _record(adds=out.size)
    return _finish(out)


def mul(a: np.ndarray, b) -> np.ndarray:
    _check(a, "a")
    b = _operand(b, a)
    out = _elementwise(np.multiply, a, b)
    _record(muls=out.size)
    return _finish(out)


def div(a: np.ndarray, b) -> np.ndarray:
    _check(a, "a")
    b = _operand(b, a)
    out = _elementwise(np.divide, a, b)
    _record(divs=out.size)
    return _finish(out)


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return mul(x, float(c))


def sqrt(x: np.ndarray) -> np.ndarray:
    _check(x)
    if (x < 0).any():
        raise NonFiniteError("sqrt of negative value")
    _record(sqrts=x.size)
    return _finish(np.sqrt(x))


def clamp_min(x: np.ndarray, lo: float) -> np.ndarray:
    _check(x)
    _record(cmps=x.size)
    return _finish(np.maximum(x, x.dtype.type(lo)))


def outer_sub_rank1(a: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``a - u v^T`` for a (m x n), u (m), v (n)."""
    _check(a, "a")
    _check(u, "u")
    _check(v, "v")
    _same_dtype(a, u)
    _same_dtype(a, v)
    if a.ndim != 2 or u.shape != (a.shape[0],) or v.shape != (a.shape[1],):
        raise TensorError(f"outer_sub_rank1 shapes {a.shape}, {u.shape}, {v.shape}")
    _record(muls=a.size, adds=a.size)
    return _finish(a - np.multiply.outer(u, v))


# ---------------------------------------------------------------------------
# linear algebra


def transpose(a: np.ndarray) -> np.ndarray:
    """Swap the last two axes (a matrix, or a batch of matrices)."""
    _check(a)
    if a.ndim < 2:
        raise TensorError("transpose expects a matrix")
    return _finish(np.ascontiguousarray(np.swapaxes(a, -1, -2)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with each output element summed left-to-right over the
    inner dimension.

    ``a`` is (m, n) or (B, m, n); ``b`` is (n, p), or (B, n, p) to pair
    batch entries.
    """
    _check(a, "a")
    _check(b, "b")
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or (b.ndim == 3 and a.ndim != 3):
        raise TensorError(f"matmul shapes {a.shape} @ {b.shape} unsupported")
    n = a.shape[-1]
    if b.shape[-2] != n:
        raise TensorError(f"inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 3 and b.shape[0] != a.shape[0]:
        raise TensorError(f"batch dims differ: {a.shape} @ {b.shape}")
    if n == 0:
        raise TensorError("matmul over empty inner dimension")
    out_size = math.prod(a.shape[:-1]) * b.shape[-1]
    _record(muls=out_size * n, adds=out_size * (n - 1))
    b_rows = np.expand_dims(b, -3)
    with np.errstate(all="ignore"):
        if out_size * n <= _CUMSUM_LIMIT:
            out = np.cumsum(a[..., :, :, None] * b_rows, axis=-2)[..., -1, :]
            return _finish(np.ascontiguousarray(out))
        # same order as the cumsum path: out = p_0, then out += p_k for k = 1..n-1
        out = a[..., :, 0, None] * b_rows[..., 0, :]
        for k in range(1, n):
            out += a[..., :, k, None] * b_rows[..., k, :]
    return _finish(out)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row-vector form of ``y = A x + b`` with ``A`` shaped (out, in)."""
    y = matmul(x, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_last_dim(x: np.ndarray, causal: bool = False) -> np.ndarray:
    """Max-subtracted softmax over the last dimension.

    With ``causal`` set on an (s x t) score matrix, row i may only attend to
    columns j <= i + (t - s); masked entries get exactly zero weight.
    """
    _check(x)
    if causal:
        if x.ndim < 2:
            raise TensorError("causal softmax needs a score matrix")
        s, t = x.shape[-2], x.shape[-1]
        allowed = np.arange(t)[None, :] <= np.arange(s)[:, None] + (t - s)
        if not allowed.any(axis=-1).all():
            raise TensorError("causal mask leaves a row with no support")
        z = np.where(allowed, x, -np.inf)
    else:
        allowed = None
        z = x
    d = x.shape[-1]
    rows = x.size // d
    m = np.max(z, axis=-1, keepdims=True)
    _record(cmps=rows * (d - 1))
    e = np.exp(z - m)
    _record(adds=x.size, exps=x.size)
    if allowed is not None:
        e = np.where(allowed, e, 0.0).astype(x.dtype)
    total = np.cumsum(e, axis=-1)[..., -1:]
    _record(adds=rows * (d - 1), divs=x.size)
    return _finish(e / total)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, 0.5 x (1 + erf(x / sqrt 2))."""
    _check(x)
    one = x.dtype.type(1.0)
    half = x.dtype.type(0.5)
    inv_sqrt2 = x.dtype.type(1.0 / math.sqrt(2.0))
    _record(muls=3 * x.size, adds=x.size, erfs=x.size)
    return _finish(half * x * (one + erf(x * inv_sqrt2)))


# ---------------------------------------------------------------------------
# last-dimension plumbing


def slice_last(x: np.ndarray, keep: int) -> np.ndarray:
    _check(x)
    if not 0 <= keep <= x.shape[-1]:
        raise TensorError(f"cannot keep {keep} of {x.shape[-1]} trailing elements")
    if keep == 0 and x.ndim == 1:
        raise TensorError("slice would produce an empty vector")
    return _finish(np.ascontiguousarray(x[..., :keep]))


def concat_last(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a, "a")
    _check(b, "b")
    _same_dtype(a, b)
    if a.shape[:-1] != b.shape[:-1]:
        raise TensorError(f"leading dims differ: {a.shape} vs {b.shape}")
    return _finish(np.concatenate([a, b], axis=-1))


def pad_last(x: np.ndarray, value: float = 0.0, count: int = 1) -> np.ndarray:
    _check(x)
    if count < 0:
        raise TensorError("negative pad count")
    pad = np.full(x.shape[:-1] + (count,), value, dtype=x.dtype)
    return concat_last(x, pad)


def drop_last_row(a: np.ndarray) -> np.ndarray:
    _check(a)
    if a.shape[0] < 2:
        raise TensorError("cannot drop the only row")
    return _finish(np.ascontiguousarray(a[:-1]))


def append_row(a: np.ndarray, row: np.ndarray) -> np.ndarray:
    _check(a, "a")
    _check(row, "row")
    _same_dtype(a, row)
    if a.shape[1:] != row.shape:
        raise TensorError(f"row shape {row.shape} does not fit {a.shape}")
    return _finish(np.concatenate([a, row[None]], axis=0))
