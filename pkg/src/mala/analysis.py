"""How attention scores respond to the magnitude of the query.

For softmax attention, scaling ``Q_i`` by ``a`` raises the score ratio of two
keys to the ``a``-th power. Vanilla linear attention ignores the magnitude of
``phi(Q_i)`` entirely. MALA sits in between: under ``phi(Q_i) -> a phi(Q_i)``

    beta_new  = (beta + a - 1) / a
    gamma_new = a * gamma

and, while all scores stay positive, the ratio of a stronger key to a weaker
one grows with ``a`` but stays bounded by ``mala_ratio_limit``.

The ratio helpers take kernel features directly so that ``a`` scales
``phi(Q)`` exactly rather than being pushed through the kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionOutput, linear_scores, mala_scores
from .kernels import DEFAULT_KERNEL, KernelKind, kernel_apply
from .numerics import (
    as_matrix,
    as_vector,
    instance_rng,
    row_entropy,
    row_softmax,
)

EXP_LIMIT = 709.0


@dataclass
class ScalingReport:
    a: float
    beta: float
    gamma: float
    beta_new: float
    gamma_new: float
    p: Optional[float]
    p_m: Optional[float]
    all_scores_positive: bool
    p_s: Optional[float] = None
    m: int = 0
    n: int = 1

    def relation_errors(self) -> tuple[float, float]:
        """Absolute errors of the recomputed beta_new / gamma_new against the closed forms."""
        return (
            abs(self.beta_new - (self.beta + self.a - 1.0) / self.a),
            abs(self.gamma_new - self.a * self.gamma),
        )

    @property
    def is_counterexample(self) -> bool:
        return bool(
            self.all_scores_positive
            and self.a > 1
            and self.p is not None
            and self.p > 1
            and not self.p_m > self.p
        )


@dataclass
class SpikinessSummary:
    mechanism: str
    entropy: Optional[float]
    max_score: float
    score_variance: float
    negative_count: int


def decompose_magnitude(phi_q_row):
    """Split a feature row into its Euclidean norm and unit direction."""
    row = as_vector(phi_q_row, "phi_q_row")
    mag = float(np.linalg.norm(row))
    if mag == 0.0:
        raise ValueError("cannot decompose the zero vector")
    return mag, row / mag


def softmax_ratio(q_row, k_m, k_n, d: int, a: float = 1.0) -> tuple[float, float]:
    """Softmax score ratio of key m over key n, before and after scaling the query by ``a``."""
    q_row = as_vector(q_row, "q_row")
    k_m = as_vector(k_m, "k_m")
    k_n = as_vector(k_n, "k_n")
    if not a >= 1:
        raise ValueError(f"scale factor must be >= 1, got {a}")
    root = math.sqrt(d)
    x = (q_row @ k_m - q_row @ k_n) / root
    qa = a * q_row
    xa = (qa @ k_m - qa @ k_n) / root
    if abs(x) > EXP_LIMIT or abs(xa) > EXP_LIMIT:
        raise OverflowError(f"softmax ratio exponent out of range ({x:.6g}, {xa:.6g})")
    return math.exp(x), math.exp(xa)


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den > 0 else None


def mala_scaling_report(phi_q_row, phi_k, m: int, n: int, a: float) -> ScalingReport:
    """Compare the MALA ratio score_m / score_n for ``phi(Q_i)`` and ``a * phi(Q_i)``.

    beta_new and gamma_new are recomputed from the scaled features rather than
    derived from beta and gamma. ``p`` / ``p_m`` are ``None`` when the score of
    key ``n`` is not positive in the corresponding instance.
    """
    row = as_vector(phi_q_row, "phi_q_row")
    phi_k = as_matrix(phi_k, "phi_k")
    if not a > 1:
        raise ValueError(f"scale factor must be > 1, got {a}")
    if m == n:
        raise ValueError("keys m and n must differ")
    scores, beta, gamma = mala_scores(row[None, :], phi_k)
    scaled, beta_new, gamma_new = mala_scores(a * row[None, :], phi_k)
    scores, scaled = scores[0], scaled[0]
    return ScalingReport(
        a=float(a),
        beta=float(beta[0]),
        gamma=float(gamma[0]),
        beta_new=float(beta_new[0]),
        gamma_new=float(gamma_new[0]),
        p=_ratio(scores[m], scores[n]),
        p_m=_ratio(scaled[m], scaled[n]),
        all_scores_positive=bool((scores > 0).all() and (scaled > 0).all()),
        m=int(m),
        n=int(n),
    )


def mala_ratio_limit(phi_q_row, phi_k, m: int, n: int) -> float:
    """Limit of the MALA ratio p_m as the query scale ``a`` goes to infinity.

    aβ/(a+β-1) tends to β, so the limit is (A_m - βγ)/(A_n - βγ) with
    A_j = β phi(Q_i).phi(K_j).
    """
    row = as_vector(phi_q_row, "phi_q_row")
    phi_k = as_matrix(phi_k, "phi_k")
    scores, beta, gamma = mala_scores(row[None, :], phi_k)
    b, g = float(beta[0]), float(gamma[0])
    a_m = b * float(row @ phi_k[m])
    a_n = b * float(row @ phi_k[n])
    den = a_n - b * g
    if not den > 0:
        raise ValueError(f"limit denominator {den:.6g} is not positive; limit undefined")
    return (a_m - b * g) / den


def lemma_c_gt_one(a: float, beta: float) -> float:
    if not (a > 1 and beta > 1):
        raise ValueError(f"need a > 1 and beta > 1, got a={a}, beta={beta}")
    return a * beta / (a + beta - 1.0)


def monotone_f_check(A_m: float, A_n: float, gamma: float, x_lo: float, x_hi: float,
                     num: int = 257) -> bool:
    """True iff f(x) = (A_m - γx)/(A_n - γx) is strictly increasing on a grid over [x_lo, x_hi]."""
    if not x_hi > x_lo:
        raise ValueError("need x_lo < x_hi")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not (A_n - gamma * x_hi > 0 and A_n - gamma * x_lo > 0):
        raise ValueError("denominator A_n - gamma*x must stay positive on the interval")
    x = np.linspace(x_lo, x_hi, num)
    f = (A_m - gamma * x) / (A_n - gamma * x)
    return bool(np.all(np.diff(f) > 0))


def normalize_query_mode(q) -> np.ndarray:
    """Divide every query row by its norm, discarding magnitude."""
    q = as_matrix(q, "q")
    norms = np.linalg.norm(q, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"row {zero[0]} of q is zero")
    return q / norms[:, None]


def spikiness_from_scores(scores, mechanism: str) -> SpikinessSummary:
    """Entropy, peak and spread of a score matrix.

    Entropy (mean over rows, nats) is reported only when no entry is negative;
    signed MALA rows fall back to max and variance.
    """
    scores = as_matrix(scores, "scores")
    negative_count = int(np.count_nonzero(scores < 0))
    entropy = float(row_entropy(scores).mean()) if negative_count == 0 else None
    return SpikinessSummary(
        mechanism=mechanism,
        entropy=entropy,
        max_score=float(scores.max()),
        score_variance=float(scores.var()),
        negative_count=negative_count,
    )


def spikiness(out: AttentionOutput, mechanism: str) -> SpikinessSummary:
    if out.scores is None:
        raise ValueError("attention output carries no score matrix")
    return spikiness_from_scores(out.scores, mechanism)


# --- seeded ensembles -------------------------------------------------------

def sample_features(rng: np.random.Generator, n: int, d: int, kernel=DEFAULT_KERNEL):
    """One query feature row and ``n`` key feature rows from standard-normal inputs.

    Redraws until the query has a positive normalizer (only ReLU can fail).
    """
    kind = KernelKind.parse(kernel)
    while True:
        phi_q = kernel_apply(kind, rng.standard_normal((1, d)))[0]
        phi_k = kernel_apply(kind, rng.standard_normal((n, d)))
        if phi_q @ phi_k.sum(axis=0) > 0:
            return phi_q, phi_k


def sample_scale(rng: np.random.Generator, a_max: float = 100.0) -> float:
    """Log-uniform scale factor in (1, a_max]."""
    return float(math.exp(math.log(a_max) - rng.uniform(0.0, math.log(a_max))))


@dataclass
class RatioSweep:
    reports: list = field(default_factory=list)
    positive_count: int = 0
    filtered_count: int = 0
    counterexamples: list = field(default_factory=list)
    monotone_failures: int = 0
    lemma_trials: int = 0
    lemma_failures: int = 0
    max_beta_error: float = 0.0
    max_gamma_error: float = 0.0

    @property
    def filtered_fraction(self) -> float:
        return self.filtered_count / max(len(self.reports), 1)


def ratio_sweep(seed: int, trials: int, scales: Optional[Sequence[float]] = None,
                kernel=DEFAULT_KERNEL, max_n: int = 16, max_d: int = 8,
                lemma_trials: int = 10_000) -> RatioSweep:
    """Sample (instance, a) pairs and test p_m > p wherever every score is positive.

    Key ``m`` is always the one with the larger unscaled score, so p >= 1. The
    query feature magnitude is spread over three decades so that both the
    positive-score and the signed regime get sampled. Scale factors cycle
    through ``scales`` when given, otherwise they are log-uniform in (1, 100].
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sweep = RatioSweep()
    for i in range(trials):
        rng = instance_rng(seed, i)
        n = int(rng.integers(2, max(max_n, 2) + 1))
        d = int(rng.integers(1, max(max_d, 1) + 1))
        phi_q, phi_k = sample_features(rng, n, d, kernel)
        phi_q = phi_q * 10.0 ** rng.uniform(-2.0, 1.0)
        j, l = (int(x) for x in rng.choice(n, size=2, replace=False))
        raw = phi_k @ phi_q
        m, k = (j, l) if raw[j] >= raw[l] else (l, j)
        a = float(scales[i % len(scales)]) if scales else sample_scale(rng)
        rep = mala_scaling_report(phi_q, phi_k, m, k, a)
        sweep.reports.append(rep)
        eb, eg = rep.relation_errors()
        sweep.max_beta_error = max(sweep.max_beta_error, eb)
        sweep.max_gamma_error = max(sweep.max_gamma_error, eg)
        if not rep.all_scores_positive:
            sweep.filtered_count += 1
            continue
        sweep.positive_count += 1
        if rep.is_counterexample:
            sweep.counterexamples.append(rep)
        if rep.p is not None and rep.p > 1:
            c = lemma_c_gt_one(a, rep.beta)
            a_m, a_n = rep.beta * raw[m], rep.beta * raw[k]
            if not monotone_f_check(a_m, a_n, rep.gamma, 1.0, c):
                sweep.monotone_failures += 1

    rng = np.random.default_rng(seed)
    pairs = 101.0 - rng.uniform(0.0, 100.0, size=(lemma_trials, 2))  # (1, 100]
    pairs = pairs[(pairs > 1).all(axis=1)]
    sweep.lemma_trials = len(pairs)
    sweep.lemma_failures = sum(lemma_c_gt_one(a, b) <= 1 for a, b in pairs)
    return sweep


def softmax_power_law_error(seed: int, trials: int, max_n: int = 16, max_d: int = 16,
                            a_max: float = 10.0) -> float:
    """Worst relative gap between p_s and p**a over random query/key pairs."""
    worst = 0.0
    for i in range(trials):
        rng = instance_rng(seed, i)
        d = int(rng.integers(1, max_d + 1))
        q, km, kn = rng.standard_normal((3, d))
        a = sample_scale(rng, a_max)
        p, p_s = softmax_ratio(q, km, kn, d, a)
        worst = max(worst, abs(p_s - p ** a) / abs(p ** a))
    return worst


@dataclass
class InvarianceCheck:
    trials: int
    max_linear_change: float
    min_mala_change: float
    max_scaled_row_sum_error: float


def magnitude_invariance_check(seed: int, trials: int, kernel=DEFAULT_KERNEL,
                               max_n: int = 32, max_d: int = 16) -> InvarianceCheck:
    """Scale phi(Q) by a > 1: linear scores must not move, MALA scores must.

    ``min_mala_change`` is taken only over instances whose keys are not all
    identical.
    """
    max_lin, min_mala, max_sum = 0.0, math.inf, 0.0
    for i in range(trials):
        rng = instance_rng(seed, i)
        n = int(rng.integers(2, max_n + 1))
        d = int(rng.integers(1, max_d + 1))
        kind = KernelKind.parse(kernel)
        phi_q = kernel_apply(kind, rng.standard_normal((n, d)))
        phi_k = kernel_apply(kind, rng.standard_normal((n, d)))
        if not (phi_q @ phi_k.sum(axis=0) > 0).all():
            continue
        a = sample_scale(rng)
        max_lin = max(max_lin, float(np.abs(linear_scores(a * phi_q, phi_k) - linear_scores(phi_q, phi_k)).max()))
        base, _, _ = mala_scores(phi_q, phi_k)
        scaled, _, _ = mala_scores(a * phi_q, phi_k)
        max_sum = max(max_sum, float(np.abs(scaled.sum(axis=1) - 1.0).max()))
        if not np.all(phi_k == phi_k[0]):
            min_mala = min(min_mala, float(np.abs(scaled - base).max()))
    return InvarianceCheck(trials, max_lin, min_mala, max_sum)


@dataclass
class EntropyStudy:
    instances: int
    mean_entropy_before: float
    mean_entropy_after: float


def query_norm_entropy_study(seed: int, instances: int = 200, n: int = 32, d: int = 16,
                             norm_range: tuple = (0.1, 10.0)) -> EntropyStudy:
    """Mean softmax-score entropy with raw queries vs. unit-normalized queries.

    Query rows get random directions and norms uniform in ``norm_range``; keys
    are standard normal.
    """
    before, after = [], []
    root = math.sqrt(d)
    for i in range(instances):
        rng = instance_rng(seed, i)
        q = normalize_query_mode(rng.standard_normal((n, d)))
        q *= rng.uniform(*norm_range, size=(n, 1))
        k = rng.standard_normal((n, d))
        before.append(row_entropy(row_softmax(q @ k.T / root)).mean())
        after.append(row_entropy(row_softmax(normalize_query_mode(q) @ k.T / root)).mean())
    return EntropyStudy(instances, float(np.mean(before)), float(np.mean(after)))
