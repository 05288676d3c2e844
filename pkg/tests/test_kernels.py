import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mala.kernels import KernelKind, KernelOverflowError, kernel_apply, kernel_derivative

ALL = list(KernelKind)


def test_examples():
    assert kernel_apply("elu1", [[0.0]])[0, 0] == 1.0
    np.testing.assert_array_equal(kernel_apply("relu", [[-2.0, 3.0]]), [[0.0, 3.0]])
    assert kernel_apply("elu1", [[-1.0]])[0, 0] == pytest.approx(math.exp(-1), abs=1e-15)
    assert kernel_apply("elu1", [[-1.0]])[0, 0] == pytest.approx(0.367879, abs=1e-6)
    assert kernel_apply("elu1", [[2.5]])[0, 0] == 3.5


def test_derivative_examples():
    assert kernel_derivative(KernelKind.ELU1, [[0.0]])[0, 0] == 1.0
    assert kernel_derivative(KernelKind.RELU, [[-1.0]])[0, 0] == 0.0
    assert kernel_derivative(KernelKind.RELU, [[0.0]])[0, 0] == 0.0
    h = 1e-6
    fd = (kernel_apply("elu1", [[-0.5 + h]]) - kernel_apply("elu1", [[-0.5 - h]]))[0, 0] / (2 * h)
    assert abs(fd - kernel_derivative("elu1", [[-0.5]])[0, 0]) < 1e-8


def test_exp_overflow_is_an_error():
    with pytest.raises(KernelOverflowError):
        kernel_apply("exp", [[710.0]])
    with pytest.raises(KernelOverflowError):
        kernel_derivative("exp", [[800.0]])
    assert np.isfinite(kernel_apply("exp", [[700.0]])).all()


def test_unknown_kernel_lists_options():
    with pytest.raises(ValueError, match="elu1, relu, exp"):
        KernelKind.parse("gelu")


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL), arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
def test_nonnegative_outputs(kind, x):
    y = kernel_apply(kind, x)
    assert y.shape == x.shape
    if kind.strictly_positive:
        assert (y > 0).all()
    else:
        assert (y >= 0).all()


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL), st.floats(-5, 5))
def test_derivative_matches_finite_difference(kind, x0):
    if kind is KernelKind.RELU and abs(x0) < 1e-4:
        return
    # ELU+1 is only C1 at 0, where central differences are first order in h
    h = 1e-7
    fd = (kernel_apply(kind, [[x0 + h]]) - kernel_apply(kind, [[x0 - h]]))[0, 0] / (2 * h)
    an = kernel_derivative(kind, [[x0]])[0, 0]
    assert abs(fd - an) <= 1e-7 * max(1.0, abs(an))
