"""Softmax attention, vanilla linear attention and magnitude-aware linear attention (MALA).

Every mechanism is self-attention over ``N`` tokens without masking. Linear
attention and MALA come in two forms: a quadratic form that materializes the
``N x N`` score matrix, and a streamed form that only keeps the key/value
accumulators ``sum_j phi(K_j)^T V_j`` (d x d_v), ``sum_j phi(K_j)`` (d) and,
for MALA, ``sum_j V_j`` (d_v).

MALA replaces the division by ``S_i = phi(Q_i) . sum_m phi(K_m)`` with an
additive correction::

    score_ij = beta_i * phi(Q_i) . phi(K_j) - gamma_i
    beta_i   = 1 + 1 / S_i
    gamma_i  = S_i / N

so each row sums to ``beta_i * S_i - N * gamma_i = 1`` while the scores keep
reacting to the magnitude of ``phi(Q_i)``. Scores may be negative; they are
passed through unclipped.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import DEFAULT_KERNEL, KernelKind, kernel_apply
from .numerics import (
    DegenerateRowError,
    ShapeError,
    _softmax_rows_inplace,
    as_matrix,
    as_vector,
    check_finite,
)


class Mechanism(enum.Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"
    MALA = "mala"

    @classmethod
    def parse(cls, name) -> "Mechanism":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown mechanism {name!r}; valid options: {valid}") from None


@dataclass
class AttentionOutput:
    """Result of one attention call.

    ``negative_count`` counts score entries <= 0 and is ``None`` for streamed
    forms, which never see individual scores. ``beta`` and ``gamma`` are only
    set for MALA.
    """

    output: np.ndarray
    scores: Optional[np.ndarray]
    row_sums: np.ndarray
    negative_count: Optional[int]
    beta: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None


def _check_qkv(q, k, v):
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] == 0:
        raise ShapeError("query/key dimension must be positive")
    if k.shape != q.shape:
        raise ShapeError(f"q is {q.shape[0]}x{q.shape[1]} but k is {k.shape[0]}x{k.shape[1]}")
    if v.shape[0] != q.shape[0]:
        raise ShapeError(f"v has {v.shape[0]} rows, expected {q.shape[0]}")
    return q, k, v


def _check_features(phi_q, phi_k):
    phi_q = as_matrix(phi_q, "phi_q")
    phi_k = as_matrix(phi_k, "phi_k")
    if phi_q.shape[1] != phi_k.shape[1]:
        raise ShapeError(f"feature widths differ: {phi_q.shape[1]} vs {phi_k.shape[1]}")
    if phi_k.shape[0] == 0:
        raise ShapeError("need at least one key")
    return phi_q, phi_k


def _normalizers(phi_q: np.ndarray, key_sum: np.ndarray) -> np.ndarray:
    s = phi_q @ key_sum
    bad = np.flatnonzero(~(s > 0))
    if bad.size:
        raise DegenerateRowError(bad)
    return s


# --- softmax ---------------------------------------------------------------

def softmax_attention(q, k, v, want_scores: bool = True) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    scores = q @ k.T
    scores *= 1.0 / math.sqrt(q.shape[1])
    _softmax_rows_inplace(scores)
    out = scores @ v
    row_sums = scores.sum(axis=1)
    neg = int(np.count_nonzero(scores <= 0))
    return AttentionOutput(out, scores if want_scores else None, row_sums, neg)


# --- vanilla linear attention ----------------------------------------------

def linear_scores(phi_q, phi_k) -> np.ndarray:
    """Row-normalized ``phi(Q) phi(K)^T`` from precomputed features."""
    phi_q, phi_k = _check_features(phi_q, phi_k)
    s = _normalizers(phi_q, phi_k.sum(axis=0))
    return (phi_q @ phi_k.T) / s[:, None]


def linear_attention_quadratic(q, k, v, kernel=DEFAULT_KERNEL) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    kind = KernelKind.parse(kernel)
    scores = linear_scores(kernel_apply(kind, q), kernel_apply(kind, k))
    return AttentionOutput(
        output=scores @ v,
        scores=scores,
        row_sums=scores.sum(axis=1),
        negative_count=int(np.count_nonzero(scores <= 0)),
    )


def linear_streamed_features(phi_q, phi_k, v) -> AttentionOutput:
    """Streamed linear attention on precomputed features."""
    phi_q, phi_k = _check_features(phi_q, phi_k)
    v = as_matrix(v, "v")
    if v.shape[0] != phi_k.shape[0]:
        raise ShapeError(f"v has {v.shape[0]} rows, expected {phi_k.shape[0]}")
    kv = phi_k.T @ v          # d x d_v
    key_sum = phi_k.sum(axis=0)  # d
    den = _normalizers(phi_q, key_sum)
    out = check_finite((phi_q @ kv) / den[:, None], "linear attention")
    return AttentionOutput(out, None, den / den, None)


def linear_attention_streamed(q, k, v, kernel=DEFAULT_KERNEL) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    kind = KernelKind.parse(kernel)
    return linear_streamed_features(kernel_apply(kind, q), kernel_apply(kind, k), v)


# --- MALA ------------------------------------------------------------------

def _mala_coeffs(s: np.ndarray, n: int):
    return 1.0 + 1.0 / s, s / n


def mala_beta_gamma(phi_q_row, phi_k) -> tuple[float, float]:
    """Return ``(beta, gamma)`` for one query row of features against all keys."""
    row = as_vector(phi_q_row, "phi_q_row")
    phi_q, phi_k = _check_features(row[None, :], phi_k)
    s = _normalizers(phi_q, phi_k.sum(axis=0))
    beta, gamma = _mala_coeffs(s, phi_k.shape[0])
    return float(beta[0]), float(gamma[0])


def mala_scores(phi_q, phi_k):
    """MALA score matrix from features. Returns ``(scores, beta, gamma)``."""
    phi_q, phi_k = _check_features(phi_q, phi_k)
    s = _normalizers(phi_q, phi_k.sum(axis=0))
    beta, gamma = _mala_coeffs(s, phi_k.shape[0])
    scores = beta[:, None] * (phi_q @ phi_k.T) - gamma[:, None]
    return scores, beta, gamma


ABLATION_MODES = ("full", "no_beta", "no_gamma", "fixed")


def ablated_mala_scores(phi_q, phi_k, mode: str = "full", beta=None, gamma=None) -> np.ndarray:
    """MALA scores with beta and/or gamma removed or pinned to constants.

    ``no_beta`` uses beta = 1, ``no_gamma`` uses gamma = 0 and ``fixed``
    substitutes the given scalar ``beta`` and ``gamma`` for every row. Only
    ``full`` keeps the sum-to-one property.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; valid options: {', '.join(ABLATION_MODES)}")
    phi_q, phi_k = _check_features(phi_q, phi_k)
    s = _normalizers(phi_q, phi_k.sum(axis=0))
    b, g = _mala_coeffs(s, phi_k.shape[0])
    raw = phi_q @ phi_k.T
    if mode == "full":
        return b[:, None] * raw - g[:, None]
    if mode == "no_beta":
        return raw - g[:, None]
    if mode == "no_gamma":
        return b[:, None] * raw
    if beta is None or gamma is None:
        raise ValueError("fixed mode needs both beta and gamma")
    return float(beta) * raw - float(gamma)


def mala_quadratic(q, k, v, kernel=DEFAULT_KERNEL, want_scores: bool = True) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    kind = KernelKind.parse(kernel)
    scores, beta, gamma = mala_scores(kernel_apply(kind, q), kernel_apply(kind, k))
    return AttentionOutput(
        output=scores @ v,
        scores=scores if want_scores else None,
        row_sums=scores.sum(axis=1),
        negative_count=int(np.count_nonzero(scores <= 0)),
        beta=beta,
        gamma=gamma,
    )


def mala_streamed_features(phi_q, phi_k, v) -> AttentionOutput:
    """Streamed MALA on precomputed features: ``beta_i phi(Q_i) sum_j phi(K_j)^T V_j - gamma_i sum_j V_j``."""
    phi_q, phi_k = _check_features(phi_q, phi_k)
    v = as_matrix(v, "v")
    n = phi_k.shape[0]
    if v.shape[0] != n:
        raise ShapeError(f"v has {v.shape[0]} rows, expected {n}")
    kv = phi_k.T @ v
    key_sum = phi_k.sum(axis=0)
    v_sum = v.sum(axis=0)
    s = _normalizers(phi_q, key_sum)
    beta, gamma = _mala_coeffs(s, n)
    out = beta[:, None] * (phi_q @ kv) - gamma[:, None] * v_sum[None, :]
    return AttentionOutput(
        output=check_finite(out, "MALA"),
        scores=None,
        row_sums=beta * s - n * gamma,
        negative_count=None,
        beta=beta,
        gamma=gamma,
    )


def mala_streamed(q, k, v, kernel=DEFAULT_KERNEL) -> AttentionOutput:
    q, k, v = _check_qkv(q, k, v)
    kind = KernelKind.parse(kernel)
    return mala_streamed_features(kernel_apply(kind, q), kernel_apply(kind, k), v)


# --- multi-head --------------------------------------------------------------

@dataclass
class MultiHeadConfig:
    num_heads: int
    d_model: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    kernel: KernelKind = DEFAULT_KERNEL
    mechanism: Mechanism = Mechanism.MALA

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model < 1:
            raise ValueError("num_heads and d_model must be positive")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        for name in ("w_q", "w_k", "w_v"):
            w = as_matrix(getattr(self, name), name)
            if w.shape != (self.d_model, self.d_model):
                raise ShapeError(f"{name} must be {self.d_model}x{self.d_model}, got {w.shape[0]}x{w.shape[1]}")
            setattr(self, name, w)
        self.kernel = KernelKind.parse(self.kernel)
        self.mechanism = Mechanism.parse(self.mechanism)


def run_mechanism(mechanism, q, k, v, kernel=DEFAULT_KERNEL) -> AttentionOutput:
    mechanism = Mechanism.parse(mechanism)
    if mechanism is Mechanism.SOFTMAX:
        return softmax_attention(q, k, v, want_scores=False)
    if mechanism is Mechanism.LINEAR:
        return linear_attention_streamed(q, k, v, kernel)
    return mala_streamed(q, k, v, kernel)


def multihead_forward(cfg: MultiHeadConfig, x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != cfg.d_model:
        raise ShapeError(f"x has {x.shape[1]} columns, expected d_model={cfg.d_model}")
    q, k, v = x @ cfg.w_q, x @ cfg.w_k, x @ cfg.w_v
    width = cfg.d_model // cfg.num_heads
    heads = []
    for h in range(cfg.num_heads):
        cols = slice(h * width, (h + 1) * width)
        heads.append(run_mechanism(cfg.mechanism, q[:, cols], k[:, cols], v[:, cols], cfg.kernel).output)
    return np.concatenate(heads, axis=1)
