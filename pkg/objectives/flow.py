"""
Diffusion-family losses on the linear interpolation path.

Time follows the data-at-one convention: ``z_t = t·z + (1−t)·eps``, so
``t = 0`` is pure noise and the velocity is ``z − eps``. ``t`` may be a
Python scalar or one value per batch element; per-sample times broadcast
over the trailing token and channel axes.

All losses reduce with the mean over every element.
"""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Tensor, constant, stop_gradient

logger = logging.getLogger(__name__)

# Upper bound of sampled times; keeps 1/(1−t) finite
T_MAX = 1.0 - 1e-3

TimeLike = Union[float, np.ndarray]


class ObjectiveError(Exception):
    """Raised when an objective is evaluated outside its domain"""

    def __init__(self, message, operation=None, value=None):
        self.message = message
        self.operation = operation
        self.value = value

        detail = ""
        if operation is not None:
            detail += f" in {operation}"
        if value is not None:
            detail += f" (got {value})"

        super().__init__(f"{message}{detail}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _time_array(t: TimeLike, like: Tensor) -> np.ndarray:
    """Reshape ``t`` so it broadcasts against ``like``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if t.ndim == 1 and like.ndim >= 1 and t.shape[0] == like.shape[0]:
        return t.reshape((t.shape[0],) + (1,) * (like.ndim - 1))
    raise ObjectiveError(
        f"time of shape {t.shape} does not match batch of shape {like.shape}",
        operation="time",
    )


def _check_range(t: TimeLike, low: float, high: float, operation: str, inclusive_high=True):
    t = np.asarray(t, dtype=np.float64)
    bad = (t < low) | ((t > high) if inclusive_high else (t >= high)) | ~np.isfinite(t)
    if np.any(bad):
        raise ObjectiveError(
            f"time outside [{low}, {high}{']' if inclusive_high else ')'}",
            operation=operation,
            value=float(t[bad].flat[0]) if t.ndim else float(t),
        )


def _scale(x: Tensor, factor: np.ndarray) -> Tensor:
    if factor.ndim == 0:
        return F.scalar_mul(x, float(factor))
    return F.mul(x, constant(factor))


@dataclass(frozen=True)
class NoisySample:
    z: Tensor
    eps: Tensor
    t: np.ndarray
    z_t: Tensor

    def check(self, atol: float = 1e-12) -> bool:
        """Recompute the interpolation and compare with the stored ``z_t``."""
        t = _time_array(self.t, self.z)
        expected = t * self.z.data + (1.0 - t) * self.eps.data
        return bool(np.allclose(self.z_t.data, expected, rtol=0.0, atol=atol))


def interpolate(z, eps, t: TimeLike) -> Tensor:
    """z_t = t·z + (1−t)·eps"""
    z, eps = _as_tensor(z), _as_tensor(eps)
    _check_range(t, 0.0, 1.0, "interpolate")
    tt = _time_array(t, z)
    return F.add(_scale(z, tt), _scale(eps, 1.0 - tt))


def sample_noisy(z, rng: np.random.Generator, t: TimeLike = None, t_max: float = T_MAX) -> NoisySample:
    """
    Draw eps ~ N(0, I) and (unless given) one t ~ U[0, t_max] per batch element

    Gradients from losses on ``z_t`` flow back into ``z`` when it is tracked.
    """
    z = _as_tensor(z)
    eps = constant(rng.standard_normal(z.shape))
    if t is None:
        t = rng.uniform(0.0, t_max, size=z.shape[0] if z.ndim else ())
    t = np.asarray(t, dtype=np.float64)
    return NoisySample(z=z, eps=eps, t=t, z_t=interpolate(z, eps, t))


def loss_velocity(vhat, z, eps) -> Tensor:
    """Joint velocity regression; gradients reach ``vhat``, ``z`` and ``eps``."""
    return F.mse(_as_tensor(vhat), F.sub(_as_tensor(z), _as_tensor(eps)))


def loss_velocity_decoupled(vhat, z_target, eps) -> Tensor:
    """Velocity regression with the clean target behind a stop-gradient."""
    return F.mse(_as_tensor(vhat), F.sub(stop_gradient(_as_tensor(z_target)), _as_tensor(eps)))


def loss_clean(zhat, z_target, t: TimeLike, weighted: bool = False) -> Tensor:
    """
    Clean-latent regression ``mean(w_t·(zhat − sg(z_target))²)``

    Args:
        zhat: predicted clean latent
        z_target: regression target, always stop-gradiented
        t: time per batch element (or scalar)
        weighted: use w_t = (1−t)⁻², otherwise w_t = 1

    Returns:
        Scalar loss tensor.
    """
    zhat = _as_tensor(zhat)
    err = F.squared_error(zhat, stop_gradient(_as_tensor(z_target)))
    if not weighted:
        _check_range(t, 0.0, 1.0, "loss_clean")
        return F.mean(err)
    _check_range(t, 0.0, 1.0, "loss_clean", inclusive_high=False)
    weight = 1.0 / (1.0 - _time_array(t, zhat)) ** 2
    return F.mean(_scale(err, weight))


def velocity_from_clean(zhat, z_t, t: TimeLike, t_max: float = T_MAX) -> Tensor:
    """Recover v = (zhat − z_t)/(1−t); times above ``t_max`` are rejected."""
    zhat, z_t = _as_tensor(zhat), _as_tensor(z_t)
    _check_range(t, 0.0, t_max, "velocity_from_clean")
    return _scale(F.sub(zhat, z_t), 1.0 / (1.0 - _time_array(t, zhat)))


def clean_from_velocity(vhat, z_t, t: TimeLike) -> Tensor:
    """zhat = z_t + (1−t)·vhat"""
    vhat, z_t = _as_tensor(vhat), _as_tensor(z_t)
    _check_range(t, 0.0, 1.0, "clean_from_velocity")
    return F.add(z_t, _scale(vhat, 1.0 - _time_array(t, vhat)))


def equivalence_check(vhat, z, eps, t: TimeLike, t_max: float = T_MAX) -> float:
    """
    Absolute discrepancy between the velocity loss and the (1−t)⁻²-weighted
    clean-latent loss of the recovered prediction, both as unreduced
    squared norms summed over the batch.
    """
    vhat, z, eps = (np.asarray(getattr(x, "data", x), dtype=np.float64) for x in (vhat, z, eps))
    _check_range(t, 0.0, t_max, "equivalence_check")
    tt = _time_array(t, constant(z))
    z_t = tt * z + (1.0 - tt) * eps
    zhat = z_t + (1.0 - tt) * vhat

    velocity_side = (vhat - (z - eps)) ** 2
    clean_side = (zhat - z) ** 2 / (1.0 - tt) ** 2
    return float(abs(velocity_side.sum() - clean_side.sum()))


def loss_detached_velocity(vhat, z_target, eps) -> Tensor:
    """Trains the sampling head only: the whole target ``z_target − eps`` is stopped."""
    return F.mse(_as_tensor(vhat), stop_gradient(F.sub(_as_tensor(z_target), _as_tensor(eps))))


def unified_sd_loss(prediction, z2) -> Tensor:
    """mean ‖P − sg(z₂)‖², the form shared by diffusion and self-distillation."""
    return F.mse(_as_tensor(prediction), stop_gradient(_as_tensor(z2)))


def predictor_output(prediction, eps, parameterization: str) -> Tensor:
    """
    The predictor output ``P`` compared against ``z₂``

    For velocity heads P = v̂ + eps (so P − z₂ = v̂ − (z₂ − eps)); clean-latent
    heads already predict z₂.
    """
    if parameterization == "velocity":
        return F.add(_as_tensor(prediction), _as_tensor(eps))
    if parameterization == "clean":
        return _as_tensor(prediction)
    raise ObjectiveError(f"unknown parameterization '{parameterization}'", operation="predictor_output")


def auxiliary_fit(vhat, z_t, t: TimeLike) -> Tensor:
    """f = (1−t)·v̂ + sg(z_t); f − z₂ = (1−t)(v̂ − v) along the path."""
    vhat = _as_tensor(vhat)
    _check_range(t, 0.0, 1.0, "auxiliary_fit")
    return F.add(_scale(vhat, 1.0 - _time_array(t, vhat)), stop_gradient(_as_tensor(z_t)))
