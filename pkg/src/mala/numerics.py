"""Dense float64 matrix helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects in C (row-major) order.
Nothing broadcasts implicitly: shapes are checked up front and a mismatch
raises :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np


class AttentionError(ValueError):
    """Base class for errors raised by this package."""


class ShapeError(AttentionError):
    pass


class NonFiniteError(AttentionError):
    pass


class DegenerateRowError(AttentionError):
    """A query row has a non-positive normalizer (e.g. ReLU features miss every key)."""

    def __init__(self, rows, what="normalizer"):
        rows = [int(r) for r in np.atleast_1d(rows)]
        self.rows = rows
        shown = ", ".join(map(str, rows[:8])) + (" ..." if len(rows) > 8 else "")
        super().__init__(f"degenerate {what} in row(s) {shown}")


SEED_STRIDE = 1_000_003


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for instance ``index`` of a run with master ``seed`` (fixed stride)."""
    return np.random.default_rng(int(seed) * SEED_STRIDE + int(index))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array in row-major order."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return check_finite(a @ b, "matmul")


def _softmax_rows_inplace(s: np.ndarray) -> np.ndarray:
    # s is overwritten; callers own the buffer.
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def row_softmax(scores) -> np.ndarray:
    """Softmax over each row, stabilised by subtracting the row maximum."""
    s = as_matrix(scores, "scores").copy()
    return _softmax_rows_inplace(s)


def row_entropy(dist, atol: float = 1e-9) -> np.ndarray:
    """Shannon entropy (nats) of each row, with ``0 log 0 = 0``.

    Every row must be a probability vector: non-negative and summing to one
    within ``atol``. Signed rows (MALA can produce them) are rejected.
    """
    p = as_matrix(dist, "dist")
    neg = np.flatnonzero((p < 0).any(axis=1))
    if neg.size:
        raise ValueError(f"row {neg[0]} has a negative entry; not a probability distribution")
    bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > atol)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {p[bad[0]].sum()!r}, expected 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)
