"""Dense float64 array math used by the tagger.

Activations, affine maps with analytic backward transforms, named trainable
parameters, and a central finite-difference gradient checker. Every
hand-written backward pass in the package is certified against `grad_check`.
All math runs in 64-bit; checkpoints narrow to 32-bit on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Standard self-normalizing constants for SELU.
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

# Floor for the relative-error denominator in gradient checks.
_REL_ERR_FLOOR = 1e-8

Matrix = np.ndarray


class InvalidInputError(ValueError):
    """Raised when an operation receives non-finite input."""


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class DeterminismError(RuntimeError):
    """Raised when a function under gradient check is not deterministic."""


def as_matrix(x) -> Matrix:
    return np.asarray(x, dtype=np.float64)


def sigmoid(x: Matrix) -> Matrix:
    """Numerically stable logistic function."""
    x = as_matrix(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def selu(x: Matrix) -> Matrix:
    x = as_matrix(x)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(x))


def sigmoid_grad_from_output(y: Matrix) -> Matrix:
    return y * (1.0 - y)


def tanh_grad_from_output(y: Matrix) -> Matrix:
    return 1.0 - y * y


def selu_grad(x: Matrix) -> Matrix:
    x = as_matrix(x)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


_ACTIVATIONS: dict[str, Callable[[Matrix], Matrix]] = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "selu": selu,
}


def apply_activation(kind: str, x: Matrix) -> Matrix:
    """Element-wise activation; `kind` is one of sigmoid|tanh|selu."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}")
    x = as_matrix(x)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"non-finite input to activation {kind!r}")
    return _ACTIVATIONS[kind](x)


def affine(W: Matrix, x: Matrix, b: Matrix) -> Matrix:
    """W @ x + b with shape validation. x may be a vector or a matrix of columns."""
    W, x, b = as_matrix(W), as_matrix(x), as_matrix(b)
    if W.ndim != 2:
        raise DimensionError(f"W must be 2-d, got shape {W.shape}")
    if x.shape[0] != W.shape[1]:
        raise DimensionError(f"W {W.shape} does not conform with x {x.shape}")
    out = W @ x
    if b.ndim == 1 and out.ndim == 2:
        b = b.reshape(-1, 1)
    if b.shape[0] != out.shape[0] or b.ndim > out.ndim:
        raise DimensionError(f"bias {b.shape} does not conform with output {out.shape}")
    return out + b


def affine_backward(dout: Matrix, W: Matrix, x: Matrix) -> tuple[Matrix, Matrix, Matrix]:
    """Gradients (dW, dx, db) for out = W @ x + b."""
    dout, W, x = as_matrix(dout), as_matrix(W), as_matrix(x)
    if x.ndim == 1:
        dW = np.outer(dout, x)
        db = dout.copy()
    else:
        dW = dout @ x.T
        db = dout.sum(axis=1)
    dx = W.T @ dout
    return dW, dx, db


@dataclass
class Parameter:
    """Named trainable array with a same-shaped gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
            if self.grad.shape != self.value.shape:
                raise DimensionError(
                    f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name!r}"
                )

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def size(self) -> int:
        return self.value.size


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    per_parameter: dict[str, float]

    @property
    def max_relative_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def grad_check(
    loss_and_grad: Callable[[], float],
    params: Sequence[Parameter],
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    loss_only: Callable[[], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad` evaluates the scalar loss and writes fresh gradients into
    every parameter's `.grad`. `loss_only`, when given, evaluates the loss
    without the backward pass (finite differencing is then ~2x faster); it
    must compute the same value. Relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    f = loss_only if loss_only is not None else loss_and_grad

    loss_a = float(loss_and_grad())
    analytic = {p.name: p.grad.copy() for p in params}
    loss_b = float(f())
    if loss_a != loss_b:
        raise DeterminismError(f"two evaluations differ: {loss_a!r} vs {loss_b!r}")

    per_parameter: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = f()
            flat[i] = orig - epsilon
            f_minus = f()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * epsilon)
        a = analytic[p.name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), _REL_ERR_FLOOR)
        rel = np.abs(a - numeric) / denom
        per_parameter[p.name] = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(epsilon=epsilon, tolerance=tolerance, per_parameter=per_parameter)
