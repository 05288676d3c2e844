"""Non-negative feature maps phi used by linear attention and MALA."""

from __future__ import annotations

import enum

import numpy as np

from .numerics import AttentionError, as_matrix

# exp() overflows float64 just above this.
EXP_LIMIT = 709.0


class KernelOverflowError(AttentionError):
    pass


class KernelKind(enum.Enum):
    ELU1 = "elu1"
    RELU = "relu"
    EXP = "exp"

    @classmethod
    def parse(cls, name: "str | KernelKind") -> "KernelKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown kernel {name!r}; valid options: {valid}") from None

    @property
    def strictly_positive(self) -> bool:
        return self is not KernelKind.RELU


DEFAULT_KERNEL = KernelKind.ELU1


def _guard_exp(x: np.ndarray) -> None:
    if x.size and x.max() > EXP_LIMIT:
        raise KernelOverflowError(f"exp kernel overflows for input {x.max():.6g} > {EXP_LIMIT}")


def kernel_apply(kind, x) -> np.ndarray:
    """Apply phi elementwise. ELU uses alpha = 1, so ELU(x) + 1 is exp(x) for x <= 0."""
    kind = KernelKind.parse(kind)
    x = as_matrix(x, "x")
    if kind is KernelKind.ELU1:
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if kind is KernelKind.RELU:
        return np.maximum(x, 0.0)
    _guard_exp(x)
    return np.exp(x)


def kernel_derivative(kind, x) -> np.ndarray:
    # ReLU uses the subgradient 0 at exactly 0.
    kind = KernelKind.parse(kind)
    x = as_matrix(x, "x")
    if kind is KernelKind.ELU1:
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    if kind is KernelKind.RELU:
        return (x > 0).astype(np.float64)
    _guard_exp(x)
    return np.exp(x)
