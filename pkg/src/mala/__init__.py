"""Softmax, linear and magnitude-aware linear attention (MALA) with analysis tooling."""

from .attention import (
    AttentionOutput,
    Mechanism,
    MultiHeadConfig,
    ablated_mala_scores,
    linear_attention_quadratic,
    linear_attention_streamed,
    linear_scores,
    mala_beta_gamma,
    mala_quadratic,
    mala_scores,
    mala_streamed,
    multihead_forward,
    softmax_attention,
)
from .kernels import KernelKind, kernel_apply, kernel_derivative
from .numerics import matmul, row_entropy, row_softmax

__version__ = "0.1.0"
