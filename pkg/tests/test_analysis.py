import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mala.analysis import (
    decompose_magnitude,
    lemma_c_gt_one,
    magnitude_invariance_check,
    mala_ratio_limit,
    mala_scaling_report,
    monotone_f_check,
    normalize_query_mode,
    query_norm_entropy_study,
    ratio_sweep,
    softmax_power_law_error,
    softmax_ratio,
    spikiness,
    spikiness_from_scores,
)
from mala.attention import AttentionOutput, linear_scores, mala_scores
from mala.kernels import kernel_apply
from mala.numerics import row_softmax

PHI_Q = [1.0]
PHI_K = [[0.4], [0.5]]


def exact_ratio(phi_q, phi_k, m, n, a):
    """Rational p or p_m for one-dimensional features."""
    s = [Fraction(phi_q) * a * Fraction(x) for x in phi_k]
    total = sum(s)
    beta, gamma = 1 + 1 / total, total / len(s)
    return (beta * s[m] - gamma) / (beta * s[n] - gamma)


def test_decompose_examples(rng):
    mag, direction = decompose_magnitude([3.0, 4.0])
    assert mag == 5.0
    np.testing.assert_allclose(direction, [0.6, 0.8], rtol=0, atol=1e-16)
    unit = np.array([0.0, 1.0, 0.0])
    mag, direction = decompose_magnitude(unit)
    assert mag == 1.0 and (direction == unit).all()
    row = rng.standard_normal(16)
    mag, direction = decompose_magnitude(row)
    assert abs(np.linalg.norm(direction) - 1) < 1e-12
    assert np.abs(mag * direction - row).max() < 1e-12
    with pytest.raises(ValueError):
        decompose_magnitude([0.0, 0.0])


def test_softmax_ratio_examples():
    q, km, kn = [1.0], [1.0], [0.0]
    p, p_s = softmax_ratio(q, km, kn, 1, 1.0)
    assert p == pytest.approx(math.e, rel=1e-15) and p_s == pytest.approx(math.e, rel=1e-15)
    p, p_s = softmax_ratio(q, km, kn, 1, 2.0)
    assert p_s == pytest.approx(math.e**2, rel=1e-14)
    assert p_s == pytest.approx(7.38906, abs=1e-5)
    assert p_s == pytest.approx(p**2, rel=1e-9)
    for a in (1.0, 3.0, 50.0):
        assert softmax_ratio([0.3, -2.0], [1.0, 1.0], [1.0, 1.0], 2, a) == (1.0, 1.0)
    with pytest.raises(OverflowError):
        softmax_ratio([1000.0], [1.0], [0.0], 1, 1.0)
    with pytest.raises(ValueError):
        softmax_ratio(q, km, kn, 1, 0.5)


def test_scaling_report_hand_case():
    rep = mala_scaling_report(PHI_Q, PHI_K, m=1, n=0, a=2.0)
    assert rep.beta == pytest.approx(19 / 9, abs=1e-15)
    assert rep.gamma == pytest.approx(0.45, abs=1e-15)
    assert rep.beta_new == pytest.approx(14 / 9, abs=1e-15)
    assert rep.gamma_new == pytest.approx(0.9, abs=1e-15)
    assert exact_ratio(1, [Fraction(2, 5), Fraction(1, 2)], 1, 0, 1) == Fraction(109, 71)
    assert exact_ratio(1, [Fraction(2, 5), Fraction(1, 2)], 1, 0, 2) == Fraction(59, 31)
    assert rep.p == pytest.approx(109 / 71, rel=1e-14)
    assert rep.p_m == pytest.approx(59 / 31, rel=1e-14)
    assert rep.p_m > rep.p
    assert rep.all_scores_positive
    assert max(rep.relation_errors()) < 1e-12
    assert not rep.is_counterexample


def test_scaling_report_equal_keys():
    # the twin keys sit above the mean score, so both ratios stay defined
    for a in (1.5, 10.0, 1e4):
        rep = mala_scaling_report([0.7, 0.2], [[0.3, 0.1], [0.3, 0.1], [0.1, 0.05]], 0, 1, a)
        assert rep.p == 1.0 and rep.p_m == 1.0


def test_scaling_report_continuity_at_one():
    rep = mala_scaling_report(PHI_Q, PHI_K, 1, 0, 1 + 1e-8)
    assert abs(rep.p_m - rep.p) < 1e-6
    assert rep.p_m > rep.p


def test_scaling_report_signed_scores_omit_ratio():
    rep = mala_scaling_report([1.0], [[1.0], [3.0]], 1, 0, 2.0)
    assert rep.p is None and rep.p_m is None
    assert not rep.all_scores_positive
    assert not rep.is_counterexample


def test_scaling_report_preconditions():
    with pytest.raises(ValueError):
        mala_scaling_report(PHI_Q, PHI_K, 1, 0, 1.0)
    with pytest.raises(ValueError):
        mala_scaling_report(PHI_Q, PHI_K, 1, 1, 2.0)


LIMIT_K = [[0.5], [0.4], [0.05]]


def test_ratio_limit():
    limit = mala_ratio_limit(PHI_Q, LIMIT_K, 0, 1)
    s = Fraction(95, 100)
    beta = 1 + 1 / s
    beta_gamma = (s + 1) / 3
    exact = (beta * Fraction(1, 2) - beta_gamma) / (beta * Fraction(2, 5) - beta_gamma)
    assert limit == pytest.approx(float(exact), rel=1e-14)
    far = mala_scaling_report(PHI_Q, LIMIT_K, 0, 1, 1e6)
    assert abs(far.p_m - limit) / limit < 1e-4
    near = mala_scaling_report(PHI_Q, LIMIT_K, 0, 1, 10.0)
    assert near.p < near.p_m < limit
    assert mala_ratio_limit([0.5, 0.5], [[1.0, 2.0], [1.0, 2.0], [0.1, 0.1]], 0, 1) == 1.0
    # with two keys the weaker one always turns negative as a grows
    with pytest.raises(ValueError):
        mala_ratio_limit(PHI_Q, PHI_K, 1, 0)


def test_exponential_beats_bounded_growth():
    q = np.array([[0.6, 0.2]])
    k = np.array([[0.9, 0.1], [0.2, 0.5], [-2.0, -1.5]])
    p, p_s = softmax_ratio(q[0], k[0], k[1], 2, 20.0)
    assert p > 1
    phi_q, phi_k = kernel_apply("elu1", q)[0], kernel_apply("elu1", k)
    limit = mala_ratio_limit(phi_q, phi_k, 0, 1)
    assert p_s > limit > 1


def test_lemma_examples():
    assert lemma_c_gt_one(2.0, 2.0) == pytest.approx(4 / 3, rel=1e-15)
    c = lemma_c_gt_one(1.001, 2.0)
    assert c > 1 and c == pytest.approx(1.0005, abs=1e-4)
    r = np.random.default_rng(0)
    pairs = 101.0 - r.uniform(0, 100, size=(10_000, 2))
    assert all(lemma_c_gt_one(a, b) > 1 for a, b in pairs if a > 1 and b > 1)
    for bad in ((1.0, 2.0), (2.0, 1.0), (0.5, 0.5)):
        with pytest.raises(ValueError):
            lemma_c_gt_one(*bad)


def test_monotone_f_examples():
    f = lambda x: (2 - 0.5 * x) / (1 - 0.5 * x)
    assert (f(0), f(1)) == (2.0, 3.0)
    assert f(1.5) == 5.0
    assert monotone_f_check(2.0, 1.0, 0.5, 0.0, 1.5)
    assert not monotone_f_check(2.0, 1.0, 0.0, 0.0, 1.5)
    assert not monotone_f_check(1.0, 1.0, 0.5, 0.0, 1.5)
    with pytest.raises(ValueError):
        monotone_f_check(2.0, 1.0, 0.5, 0.0, 2.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0001, 100), st.floats(0.05, 5), st.floats(0.05, 5), st.floats(0.001, 10))
def test_appendix_chain(a, x_m, x_n, mag):
    """p_m = f(c) > f(1) = p whenever both rows stay positive."""
    phi_q, phi_k = [mag], [[x_m], [x_n], [0.5 * (x_m + x_n)]]
    rep = mala_scaling_report(phi_q, phi_k, 0, 1, a)
    eb, eg = rep.relation_errors()
    assert eb < 1e-10 and eg < 1e-10
    if rep.all_scores_positive and rep.p > 1:
        c = lemma_c_gt_one(a, rep.beta)
        a_m, a_n = rep.beta * mag * x_m, rep.beta * mag * x_n
        assert monotone_f_check(a_m, a_n, rep.gamma, 1.0, c)
        assert rep.p_m > rep.p
        f_c = (a_m - rep.gamma * c) / (a_n - rep.gamma * c)
        assert f_c == pytest.approx(rep.p_m, rel=1e-9)


def test_normalize_query_mode(rng):
    unit = normalize_query_mode(rng.standard_normal((5, 4)))
    assert np.abs(normalize_query_mode(unit) - unit).max() < 1e-12
    np.testing.assert_allclose(normalize_query_mode([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-16)
    with pytest.raises(ValueError, match="row 1"):
        normalize_query_mode([[1.0, 0.0], [0.0, 0.0]])


def test_spikiness_examples():
    one_hot = np.eye(4)
    s = spikiness_from_scores(one_hot, "softmax")
    assert s.entropy == 0.0 and s.max_score == 1.0 and s.negative_count == 0
    uniform = np.full((16, 16), 1 / 16)
    s = spikiness_from_scores(uniform, "linear")
    assert s.entropy == pytest.approx(math.log(16), abs=1e-12)
    assert s.entropy == pytest.approx(2.7726, abs=1e-4)
    assert s.max_score == 1 / 16
    signed = spikiness_from_scores([[-0.75, 1.75]], "mala")
    assert signed.entropy is None and signed.negative_count == 1 and signed.max_score == 1.75
    with pytest.raises(ValueError):
        spikiness(AttentionOutput(np.zeros((1, 1)), None, np.ones(1), None), "mala")


def test_spikiness_trend_is_recorded(rng):
    """Measured on one seeded instance at query scale 4; recorded, not a law."""
    n, d = 16, 8
    q, k = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    phi_q, phi_k = kernel_apply("elu1", q), kernel_apply("elu1", k)
    soft = spikiness_from_scores(row_softmax(4 * q @ k.T / math.sqrt(d)), "softmax")
    lin = spikiness_from_scores(linear_scores(4 * phi_q, phi_k), "linear")
    mal = spikiness_from_scores(mala_scores(4 * phi_q, phi_k)[0], "mala")
    assert soft.entropy < lin.entropy
    assert mal.max_score > 0


def test_ensembles_are_deterministic():
    a = ratio_sweep(3, 200)
    b = ratio_sweep(3, 200)
    assert [(r.a, r.p, r.p_m) for r in a.reports] == [(r.a, r.p, r.p_m) for r in b.reports]
    assert a.positive_count + a.filtered_count == 200
    assert a.filtered_count > 0 and a.positive_count > 0
    assert not a.counterexamples


def test_ratio_sweep_with_fixed_scale():
    sweep = ratio_sweep(0, 500, scales=[1.0001])
    assert all(r.a == 1.0001 for r in sweep.reports)
    rel = [(r.p_m - r.p) / r.p for r in sweep.reports if r.all_scores_positive and r.p > 1]
    assert rel and all(0 < x < 0.05 for x in rel)
    assert float(np.median(rel)) < 1e-3


def test_small_ensembles():
    assert softmax_power_law_error(1, 200) < 1e-9
    inv = magnitude_invariance_check(1, 100)
    assert inv.max_linear_change < 1e-12 and inv.min_mala_change > 1e-6
    assert inv.max_scaled_row_sum_error < 1e-10
    study = query_norm_entropy_study(1, instances=20)
    assert study.instances == 20 and study.mean_entropy_after > 0
