"""Finite-difference gradient checking for the toy models."""

import logging
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DENOMINATOR_FLOOR = 1e-6


class GradcheckReport(BaseModel):
    """Outcome of a gradient check.

    Attributes:
        passed: True when every checked coordinate is within tolerance
        max_relative_error: Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
        worst_coordinate: Flat parameter index with the largest error
        checked: Number of coordinates compared
        tolerance: Relative error bound used
        corrupted_coordinate: Coordinate whose analytic gradient was doubled, if any
    """
    model_config = ConfigDict(frozen=True)

    passed: bool
    max_relative_error: float
    worst_coordinate: int
    checked: int
    tolerance: float
    corrupted_coordinate: Optional[int] = None


def central_difference(loss_fn: Callable[[np.ndarray], float], params: np.ndarray, index: int,
                       step: float = DEFAULT_STEP) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h."""
    x = np.array(params, dtype=np.float64, copy=True)
    x[index] += step
    f_plus = loss_fn(x)
    x[index] -= 2.0 * step
    f_minus = loss_fn(x)
    return (f_plus - f_minus) / (2.0 * step)


def gradcheck(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    params: np.ndarray,
    tolerance: float = 1e-4,
    n_coordinates: int = 100,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    corrupt: bool = False,
) -> GradcheckReport:
    """Compare an analytic gradient with central differences, coordinate-wise.

    Args:
        loss_fn: Scalar loss of a flat parameter vector
        grad_fn: Analytic gradient of loss_fn
        params: Point to check at
        tolerance: Maximum relative error
        n_coordinates: Randomly sampled coordinates to compare (all when fewer exist)
        step: Finite-difference step
        seed: Coordinate sampling seed
        corrupt: Double the largest analytic coordinate first, to prove the check bites

    Returns:
        GradcheckReport
    """
    params = np.asarray(params, dtype=np.float64)
    analytic = np.array(grad_fn(params), dtype=np.float64, copy=True).ravel()
    if analytic.shape != (params.size,):
        raise ValueError(f"Gradient has {analytic.size} entries for {params.size} parameters")

    rng = np.random.default_rng(seed)
    count = min(n_coordinates, params.size)
    coordinates = rng.choice(params.size, size=count, replace=False)
    corrupted = None
    if corrupt:
        corrupted = int(np.argmax(np.abs(analytic)))
        analytic[corrupted] *= 2.0
        if corrupted not in coordinates:
            coordinates = np.append(coordinates, corrupted)

    worst_error, worst_index = 0.0, int(coordinates[0]) if len(coordinates) else 0
    for index in coordinates:
        numeric = central_difference(loss_fn, params, int(index), step)
        a = analytic[index]
        error = abs(a - numeric) / max(abs(a), abs(numeric), DENOMINATOR_FLOOR)
        if error > worst_error:
            worst_error, worst_index = float(error), int(index)

    report = GradcheckReport(
        passed=worst_error <= tolerance,
        max_relative_error=worst_error,
        worst_coordinate=worst_index,
        checked=len(coordinates),
        tolerance=tolerance,
        corrupted_coordinate=corrupted,
    )
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"Gradcheck {'passed' if report.passed else 'FAILED'}: "
                      f"max relative error {worst_error:.3e} at coordinate {worst_index} ({report.checked} checked)")
    return report
