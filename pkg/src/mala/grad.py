"""Analytic backward pass of streamed MALA, checked against central differences.

Forward, with P = phi(Q), F = phi(K)::

    z   = sum_j F_j              (d)
    U   = F^T V                  (d x d_v)
    w   = sum_j V_j              (d_v)
    S_i = P_i . z
    Y_i = beta_i P_i U - gamma_i w,   beta_i = 1 + 1/S_i,  gamma_i = S_i / N

beta and gamma are differentiated through, not treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import _check_qkv, _normalizers, mala_streamed
from .kernels import DEFAULT_KERNEL, KernelKind, kernel_apply, kernel_derivative
from .numerics import NonFiniteError, ShapeError, as_matrix, instance_rng

GRADCHECK_TOL = 1e-5
FD_STEP = 1e-6
RELU_KINK_MARGIN = 1e-4


@dataclass
class GradBundle:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray


def mala_backward(q, k, v, kernel=DEFAULT_KERNEL, upstream=None) -> GradBundle:
    """Gradients of ``sum(upstream * Y)`` with respect to q, k and v."""
    q, k, v = _check_qkv(q, k, v)
    kind = KernelKind.parse(kernel)
    n = q.shape[0]
    g = as_matrix(upstream, "upstream")
    if g.shape != v.shape:
        raise ShapeError(f"upstream is {g.shape[0]}x{g.shape[1]}, expected {v.shape[0]}x{v.shape[1]}")

    p = kernel_apply(kind, q)
    f = kernel_apply(kind, k)
    z = f.sum(axis=0)
    u = f.T @ v
    w = v.sum(axis=0)
    s = _normalizers(p, z)
    beta = 1.0 + 1.0 / s
    gamma = s / n

    pu = p @ u
    d_beta = np.einsum("ij,ij->i", g, pu)
    d_gamma = -(g @ w)
    d_s = -d_beta / s**2 + d_gamma / n

    d_p = beta[:, None] * (g @ u.T) + d_s[:, None] * z[None, :]
    d_u = p.T @ (beta[:, None] * g)
    d_z = p.T @ d_s
    d_w = -(gamma @ g)

    d_f = v @ d_u.T + d_z[None, :]
    d_v = f @ d_u + d_w[None, :]
    return GradBundle(
        d_q=d_p * kernel_derivative(kind, q),
        d_k=d_f * kernel_derivative(kind, k),
        d_v=d_v,
    )


def finite_diff_grad(f, x, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(as_matrix(x, "x"))
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite near entry {idx}")
        grad[idx] = (hi - lo) / (2 * h)
    return grad


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@dataclass
class GradcheckReport:
    seed: int
    trials: int
    kernel: str
    max_error_q: float
    max_error_k: float
    max_error_v: float
    tol: float = GRADCHECK_TOL

    @property
    def max_error(self) -> float:
        return max(self.max_error_q, self.max_error_k, self.max_error_v)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _sample_instance(rng, kind: KernelKind, clamp: float):
    while True:
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 7))
        d_v = int(rng.integers(1, 5))
        q = np.clip(rng.standard_normal((n, d)), -clamp, clamp)
        k = np.clip(rng.standard_normal((n, d)), -clamp, clamp)
        v = rng.standard_normal((n, d_v))
        upstream = rng.standard_normal((n, d_v))
        if kind is KernelKind.RELU:
            # no normalizer may vanish anywhere inside the finite-difference stencil
            p, f = kernel_apply(kind, q), kernel_apply(kind, k)
            if not (p @ f.sum(axis=0) > 0.1).all():
                continue
        return q, k, v, upstream


def gradcheck(seed: int = 0, trials: int = 20, kernel=DEFAULT_KERNEL, h: float = FD_STEP,
              clamp: float = 3.0) -> GradcheckReport:
    """Compare mala_backward with central differences on random instances.

    Inputs are clipped to ``[-clamp, clamp]``. For the ReLU kernel, q/k entries
    within ``RELU_KINK_MARGIN`` of zero are left out of the comparison.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kind = KernelKind.parse(kernel)
    worst = {"q": 0.0, "k": 0.0, "v": 0.0}
    for t in range(trials):
        rng = instance_rng(seed, t)
        q, k, v, up = _sample_instance(rng, kind, clamp)
        analytic = mala_backward(q, k, v, kind, up)

        def loss(qq=q, kk=k, vv=v):
            return float(np.sum(up * mala_streamed(qq, kk, vv, kind).output))

        numeric = {
            "q": finite_diff_grad(lambda x: loss(qq=x), q, h),
            "k": finite_diff_grad(lambda x: loss(kk=x), k, h),
            "v": finite_diff_grad(lambda x: loss(vv=x), v, h),
        }
        pairs = {"q": (analytic.d_q, q), "k": (analytic.d_k, k), "v": (analytic.d_v, None)}
        for name, (an, src) in pairs.items():
            err = relative_error(an, numeric[name])
            if kind is KernelKind.RELU and src is not None:
                err = err[np.abs(src) > RELU_KINK_MARGIN]
            if err.size:
                worst[name] = max(worst[name], float(err.max()))
    return GradcheckReport(seed, trials, kind.value, worst["q"], worst["k"], worst["v"])
