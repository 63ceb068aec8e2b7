"""Dense float64 arithmetic, differentiable primitives and gradient checking.

Every function here is pure: inputs are never modified and no module state
is kept, so the helpers are safe to call from several threads at once.
"""

from typing import Callable, Tuple

import numpy as np
import numpy.typing as npt
from scipy import special

from .exceptions import NumericalError, ShapeMismatchError
from .models import GradCheckReport

Matrix = npt.NDArray[np.float64]

NORM_TOLERANCE = 1e-12
LOG_FLOOR = 1e-12


def as_matrix(values: npt.ArrayLike, name: str = "matrix") -> Matrix:
    """Coerce ``values`` to a 2-D float64 array."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeMismatchError(name, 2, array.ndim)
    return array


def ensure_finite(values: np.ndarray, name: str = "values") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NumericalError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return values


def matmul(a: npt.ArrayLike, b: npt.ArrayLike) -> Matrix:
    """Shape-checked matrix product with a finiteness guarantee."""
    left = as_matrix(a, "left operand")
    right = as_matrix(b, "right operand")
    if left.shape[1] != right.shape[0]:
        raise ShapeMismatchError("matmul inner dimension", left.shape[1], right.shape[0])
    return ensure_finite(left @ right, "matmul result")


def softmax(logits: npt.ArrayLike) -> Matrix:
    """Softmax over the last axis, max-subtracted for stability."""
    values = np.asarray(logits, dtype=np.float64)
    if values.size == 0 or values.shape[-1] == 0:
        raise NumericalError("empty logits")
    ensure_finite(values, "logits")
    return special.softmax(values, axis=-1)  # type: ignore[no-any-return]


def log_softmax(logits: npt.ArrayLike) -> Matrix:
    values = np.asarray(logits, dtype=np.float64)
    if values.size == 0 or values.shape[-1] == 0:
        raise NumericalError("empty logits")
    ensure_finite(values, "logits")
    return special.log_softmax(values, axis=-1)  # type: ignore[no-any-return]


def softmax_backward(probs: Matrix, grad_probs: Matrix) -> Matrix:
    """Gradient w.r.t. logits given the gradient w.r.t. ``softmax(logits)``."""
    inner = np.sum(probs * grad_probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)  # type: ignore[no-any-return]


def l2_normalize(v: npt.ArrayLike, axis: int = -1) -> Matrix:
    """Scale ``v`` to unit Euclidean norm along ``axis``."""
    values = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(values, axis=axis, keepdims=True)
    if np.any(norms <= NORM_TOLERANCE):
        raise NumericalError("degenerate vector: norm below 1e-12")
    return values / norms  # type: ignore[no-any-return]


def l2_normalize_backward(raw: Matrix, grad_unit: Matrix, axis: int = -1) -> Matrix:
    """Gradient w.r.t. ``raw`` of ``l2_normalize(raw)`` given the upstream gradient."""
    norms = np.linalg.norm(raw, axis=axis, keepdims=True)
    unit = raw / norms
    radial = np.sum(unit * grad_unit, axis=axis, keepdims=True)
    return (grad_unit - unit * radial) / norms  # type: ignore[no-any-return]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre_activation: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(pre_activation > 0.0, grad_out, 0.0)


def linear_backward(
    x: Matrix, weight: Matrix, grad_out: Matrix
) -> Tuple[Matrix, Matrix, Matrix]:
    """Gradients of ``y = x @ weight + bias``: (d_weight, d_bias, d_x)."""
    return x.T @ grad_out, grad_out.sum(axis=0), grad_out @ weight.T


def safe_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: npt.ArrayLike,
    point: npt.ArrayLike,
    step: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``point``.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if step <= 0:
        raise NumericalError(f"finite-difference step must be positive, got {step}")
    x = np.array(point, dtype=np.float64, copy=True)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeMismatchError("analytic gradient", x.shape, analytic.shape)

    worst = 0.0
    worst_index: Tuple[int, ...] = tuple(0 for _ in x.shape)
    for index in np.ndindex(*x.shape):
        original = x[index]
        x[index] = original + step
        plus = float(f(x))
        x[index] = original - step
        minus = float(f(x))
        x[index] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericalError(f"non-finite function value probing coordinate {index}")
        numeric = (plus - minus) / (2.0 * step)
        exact = float(analytic[index])
        denominator = max(abs(exact), abs(numeric), floor)
        error = abs(exact - numeric) / denominator
        if error > worst:
            worst = error
            worst_index = tuple(int(i) for i in index)

    return GradCheckReport(
        max_rel_error=worst,
        worst_coordinate=worst_index,
        step=step,
        n_coordinates=int(x.size),
    )
