"""
Brute-force posterior of the clean latent over a finite dataset.

With a uniform prior over the dataset points and the Gaussian path
p(z_t | z) = N(t·z, (1−t)²·I), the posterior weights are a softmax of
−‖z_t − t·z_i‖² / (2(1−t)²). These moments are the oracle for the
bias–variance split of the joint diffusion loss.
"""
import logging
from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np
from scipy.special import logsumexp

from autodiff import functional as F
from autodiff.tensor import GradTape, Parameter, backward, constant

from .flow import ObjectiveError

logger = logging.getLogger(__name__)

IDENTITY_TOLERANCE = 1e-10

# exp() of log-weights below this underflows without stabilization
_UNDERFLOW_LOG = np.log(np.finfo(np.float64).tiny)


@dataclass(frozen=True)
class PosteriorMoments:
    mean: np.ndarray
    variance: float
    support_size: int
    weights: np.ndarray


class BiasVariance(NamedTuple):
    fit: float
    variance: float
    total: float


def _dataset_array(dataset) -> np.ndarray:
    data = np.asarray([np.asarray(getattr(p, "data", p), dtype=np.float64) for p in dataset])
    if data.shape[0] == 0:
        raise ObjectiveError("posterior needs a nonempty dataset", operation="posterior_moments")
    return data


def posterior_moments(dataset, z_t, t: float) -> PosteriorMoments:
    """
    Posterior mean and total variance (trace of the covariance)

    Args:
        dataset: sequence of latents, all the same shape
        z_t: the noisy latent conditioned on
        t: interpolation time, ``0 <= t < 1``

    Returns:
        PosteriorMoments with the normalized weights per dataset point.
    """
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise ObjectiveError("posterior needs 0 <= t < 1", operation="posterior_moments", value=t)
    data = _dataset_array(dataset)
    z_t = np.asarray(getattr(z_t, "data", z_t), dtype=np.float64)
    if z_t.shape != data.shape[1:]:
        raise ObjectiveError(
            f"z_t shape {z_t.shape} does not match dataset point shape {data.shape[1:]}",
            operation="posterior_moments",
        )

    flat = data.reshape(data.shape[0], -1)
    dist = np.sum((z_t.reshape(-1) - t * flat) ** 2, axis=1)
    log_w = -dist / (2.0 * (1.0 - t) ** 2)
    peak = float(np.max(log_w))
    if not np.isfinite(peak):
        raise ObjectiveError(
            "all posterior weights underflow", operation="posterior_moments", value=peak
        )
    if peak < _UNDERFLOW_LOG:
        logger.warning(f"posterior log-weights peak at {peak:.1f}; relying on log-sum-exp")

    weights = np.exp(log_w - logsumexp(log_w))
    mean = weights @ flat
    variance = float(weights @ np.sum((flat - mean) ** 2, axis=1))
    return PosteriorMoments(
        mean=mean.reshape(data.shape[1:]),
        variance=max(variance, 0.0),
        support_size=int(data.shape[0]),
        weights=weights,
    )


def bias_variance_check(f_value, dataset, z_t, t: float,
                        tolerance: float = IDENTITY_TOLERANCE) -> BiasVariance:
    """
    Split E_{z₂|z_t}‖f − z₂‖² into ‖f − E[z₂|z_t]‖² + Var[z₂|z_t]

    The expectation is summed directly over the dataset. Raises
    ObjectiveError when the identity is off by more than ``tolerance`` or
    when ``f`` scores below the posterior mean.
    """
    moments = posterior_moments(dataset, z_t, t)
    data = _dataset_array(dataset).reshape(moments.support_size, -1)
    f = np.asarray(getattr(f_value, "data", f_value), dtype=np.float64).reshape(-1)
    mean = moments.mean.reshape(-1)

    total = float(moments.weights @ np.sum((f - data) ** 2, axis=1))
    fit = float(np.sum((f - mean) ** 2))
    residual = abs(total - (fit + moments.variance))
    if residual > tolerance:
        raise ObjectiveError(
            "expected loss differs from fit + variance", operation="bias_variance_check", value=residual
        )

    at_mean = float(moments.weights @ np.sum((mean - data) ** 2, axis=1))
    if total < at_mean - tolerance:
        raise ObjectiveError(
            "posterior mean is not the minimizer", operation="bias_variance_check", value=total - at_mean
        )
    return BiasVariance(fit=fit, variance=moments.variance, total=total)


def variance_suppression_descent(targets, c, lr: float = 0.1, steps: int = 10) -> List[float]:
    """
    Gradient descent on the targets alone of mean_i ‖c − z_i‖²

    Args:
        targets: (N, d) initial target latents
        c: the shared prediction the targets are pulled toward
        lr: step size
        steps: number of updates

    Returns:
        Empirical variance of the targets before the first step and after
        every step.
    """
    z = Parameter("targets", np.asarray(targets, dtype=np.float64))
    anchor = constant(np.broadcast_to(np.asarray(c, dtype=np.float64), z.shape))

    def spread() -> float:
        return float(np.mean(np.sum((z.data - z.data.mean(axis=0)) ** 2, axis=-1)))

    history = [spread()]
    for step in range(steps):
        with GradTape() as tape:
            loss = F.sum(F.mean(F.squared_error(anchor, z), axis=0))
        grad = backward(loss, tape)["targets"]
        z.assign(z.data - lr * grad)
        history.append(spread())
        logger.debug(f"variance suppression step {step}: variance {history[-1]:.6e}")
    return history
