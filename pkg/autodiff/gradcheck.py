"""
Central finite-difference oracle for the gradient tape
"""
import logging
from typing import Callable, Dict, Iterable, Union

import numpy as np

from .tensor import AutodiffError, GradTape, Parameter, Tensor, backward

logger = logging.getLogger(__name__)


class GradientCheckError(AutodiffError):
    """Raised when an evaluation of the checked function is not finite"""

    def __init__(self, message, parameter=None, index=None):
        self.parameter = parameter
        self.index = index

        detail = ""
        if parameter is not None:
            detail += f" for parameter '{parameter}'"
        if index is not None:
            detail += f" at index {index}"

        super().__init__(f"{message}{detail}", op="finite-diff")


def _evaluate(f: Callable[[], Tensor], name: str, index) -> float:
    value = f()
    scalar = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(scalar):
        raise GradientCheckError("non-finite function value", parameter=name, index=index)
    return scalar


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Union[Iterable[Parameter], Dict[str, Parameter]],
    h: float = 1e-5,
    abs_floor: float = 1e-12,
) -> float:
    """
    Compare tape gradients of ``f`` against central differences

    Args:
        f: rebuilds the scalar loss from the current parameter values
        params: parameters to perturb
        h: finite-difference step
        abs_floor: added to the numeric magnitude in the denominator

    Returns:
        max over all parameter elements of
        |analytic - numeric| / (|numeric| + abs_floor)
    """
    if h <= 0:
        raise GradientCheckError(f"step must be positive, got {h}")
    params = list(params.values()) if isinstance(params, dict) else list(params)

    with GradTape() as tape:
        tape.watch(params)
        loss = f()
    analytic = backward(loss, tape)

    worst, worst_at = 0.0, None
    for param in params:
        base = param.data.copy()
        grad = analytic[param.name]
        try:
            for index in np.ndindex(base.shape):
                shifted = base.copy()
                shifted[index] += h
                param.assign(shifted)
                upper = _evaluate(f, param.name, index)
                shifted[index] = base[index] - h
                param.assign(shifted)
                lower = _evaluate(f, param.name, index)

                numeric = (upper - lower) / (2.0 * h)
                error = abs(grad[index] - numeric) / (abs(numeric) + abs_floor)
                if error > worst:
                    worst, worst_at = error, (param.name, index)
        finally:
            param.assign(base)

    if worst_at is not None:
        logger.debug(f"finite-diff worst relative error {worst:.3e} at {worst_at}")
    return worst
