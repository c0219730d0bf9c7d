from __future__ import annotations

import numpy as np
from typing_extensions import Callable

DEFAULT_PERTURBATION = 1e-5


def numerical_gradient(
    function: Callable[[], float],
    array: np.ndarray,
    perturbation: float = DEFAULT_PERTURBATION,
) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function w.r.t. an array the function reads.
    The array is modified in place during the evaluation and restored afterwards.

    :param function: Evaluates the scalar that depends on `array`.
    :param array: The array to perturb.
    :param perturbation: The step h in (f(x+h) - f(x-h)) / 2h.
    :return: The gradient, same shape as `array`.
    """
    gradient = np.zeros_like(array, dtype=np.float64)
    iterator = np.nditer(array, flags=["multi_index"])
    for _ in iterator:
        index = iterator.multi_index
        original = array[index]
        array[index] = original + perturbation
        upper = function()
        array[index] = original - perturbation
        lower = function()
        array[index] = original
        gradient[index] = (upper - lower) / (2.0 * perturbation)
    return gradient


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """
    ‖a - n‖ / max(‖a‖ + ‖n‖, floor) over all entries.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denominator = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denominator)
