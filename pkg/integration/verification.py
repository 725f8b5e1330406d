"""
Property battery behind the ``verify`` command.

Each check is a named property with a tolerance. A check passes when its
measured error stays below the tolerance and nothing raises; the report
collects every failure instead of stopping at the first.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np
from tqdm import tqdm

from autodiff import functional as F
from autodiff.gradcheck import GradientCheckError, finite_diff_check
from autodiff.tensor import AutodiffError, Parameter, constant
from diagnostics.spectrum import SpectrumError, effective_rank
from network.alignment import FrozenTeacher
from network.backbone import UnifiedBackbone
from network.config import ModelConfig
from objectives.flow import (
    T_MAX,
    ObjectiveError,
    auxiliary_fit,
    equivalence_check,
    interpolate,
    loss_clean,
    loss_detached_velocity,
)
from objectives.posterior import bias_variance_check, variance_suppression_descent
from sampler.euler import euler_integrate

logger = logging.getLogger(__name__)

EQUIVALENCE_DRAWS = 1000
BIAS_VARIANCE_DATASETS = 100

CHECK_ERRORS = (GradientCheckError, AutodiffError, ObjectiveError, SpectrumError, FloatingPointError)


class VerificationFailure(Exception):
    """Raised when one or more properties fail"""

    def __init__(self, message, failures=None, report=None):
        self.message = message
        self.failures = failures or []
        self.report = report

        detail = ""
        if self.failures:
            detail += f": {', '.join(name for name, _ in self.failures)}"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class Check:
    name: str
    measure: Callable[[np.random.Generator], float]
    tolerance: float


@dataclass
class VerificationReport:
    passed: List[str] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.passed) + len(self.failures)

    @property
    def ok(self) -> bool:
        return not self.failures


# Gradient checks

def _uniform_param(rng, name, shape, low=0.2, high=1.5):
    return Parameter(name, rng.uniform(low, high, size=shape))


def _op_gradcheck(build):
    def measure(rng):
        f, params = build(rng)
        return finite_diff_check(f, params)
    return measure


def _matmul(rng):
    a, b = _uniform_param(rng, "a", (3, 4)), _uniform_param(rng, "b", (4, 2))
    mix = constant(rng.uniform(0.5, 1.5, size=(3, 2)))
    return (lambda: F.sum(F.matmul(a, b) * mix)), [a, b]


def _layer_norm(rng):
    x = _uniform_param(rng, "x", (3, 4))
    mix = constant(rng.uniform(0.5, 1.5, size=(3, 4)))
    return (lambda: F.sum(F.layer_norm(x) * mix)), [x]


def _softmax_gelu(rng):
    x = _uniform_param(rng, "x", (3, 4), low=-1.0, high=1.0)
    mix = constant(rng.uniform(0.5, 1.5, size=(3, 4)))
    return (lambda: F.sum(F.softmax(F.gelu(x)) * mix)), [x]


def _cross_entropy(rng):
    logits = _uniform_param(rng, "logits", (4, 5), low=-2.0, high=2.0)
    labels = rng.integers(0, 5, size=4)
    return (lambda: F.cross_entropy_with_logits(logits, labels)), [logits]


def _cosine(rng):
    a, b = _uniform_param(rng, "a", (3, 4)), _uniform_param(rng, "b", (3, 4))
    return (lambda: F.mean(F.cosine_similarity(a, b))), [a, b]


def backbone_gradcheck(rng) -> float:
    """Composite training loss of a tiny backbone against central differences"""
    config = ModelConfig(
        image_size=8, channels=1, patch_size=4, trunk_layers=1, hidden_dim=8, attention_heads=2,
        latent_dim=4, register_count=2, class_count=3, time_embed_dim=8, mlp_ratio=2,
        teacher_dim=4, init_std=0.3,
    )
    model = UnifiedBackbone(config, seed=int(rng.integers(1 << 31)))
    for name, param in model.params.items():
        if ".ada." in name:
            param.assign(rng.normal(scale=0.2, size=param.shape))
    x = rng.uniform(size=(2, 1, 8, 8))
    eps = constant(rng.normal(size=(2, config.token_count, config.latent_dim)))
    t = np.array([0.3, 0.8])
    labels = np.array([0, config.null_label])
    target_features = FrozenTeacher(config)(x)

    def total():
        encoded = model.encode_pass(x)
        z = encoded.z
        trunk = model.diffuse_forward(interpolate(z, eps, t), t, labels)
        loss = loss_clean(model.predict_clean(trunk), z, t)
        loss = loss + loss_detached_velocity(model.predict_velocity(trunk), z, eps)
        loss = loss + F.mse(model.decode(trunk), constant(x))
        loss = loss + F.cross_entropy_with_logits(model.classify(z), np.array([0, 2])) * 0.1
        return loss + model.align_features(0, encoded.hidden, target_features) * 0.5

    return finite_diff_check(total, model.params, abs_floor=1e-4)


# Objective batteries

def equivalence_battery(rng, draws: int = EQUIVALENCE_DRAWS) -> float:
    worst = 0.0
    for _ in range(draws):
        vhat, z, eps = (rng.normal(size=(4,)) for _ in range(3))
        worst = max(worst, equivalence_check(vhat, z, eps, rng.uniform(0.0, T_MAX)))
    return worst


def bias_variance_battery(rng, datasets: int = BIAS_VARIANCE_DATASETS) -> float:
    """Largest |total − (fit + variance)| with f built by auxiliary_fit"""
    worst = 0.0
    for _ in range(datasets):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        data = list(rng.normal(size=(n, d)))
        t = rng.uniform(0.0, 0.95)
        z_t = t * data[0] + (1.0 - t) * rng.normal(size=d)
        f = auxiliary_fit(rng.normal(size=d), z_t, t)
        fit, variance, total = bias_variance_check(f, data, z_t, t)
        worst = max(worst, abs(total - (fit + variance)))
    return worst


def variance_descent_monotone(rng) -> float:
    """Largest step-to-step change of the target variance; negative when it always falls"""
    history = variance_suppression_descent(rng.normal(size=(16, 3)), np.zeros(3), lr=0.1, steps=10)
    return float(np.max(np.diff(history)))


# Effective rank units

def erank_units(rng) -> float:
    u = np.arange(1.0, 6.0)[:, None] @ np.array([[1.0, -2.0, 0.5]])
    m = rng.normal(size=(12, 5))
    errors = [
        abs(effective_rank(np.eye(4)) - 4.0),
        abs(effective_rank(u) - 1.0),
        abs(effective_rank(np.diag([2.0, 2.0, 2.0])) - 3.0),
        abs(effective_rank(-3.7 * m) - effective_rank(m)),
        abs(effective_rank(m[rng.permutation(12)]) - effective_rank(m)),
    ]
    return float(max(errors))


def erank_bounds(rng) -> float:
    """Distance outside [1, min(n, m)] over random matrices"""
    worst = 0.0
    for _ in range(20):
        rows, cols = int(rng.integers(2, 20)), int(rng.integers(1, 8))
        e = effective_rank(rng.normal(size=(rows, cols)))
        worst = max(worst, 1.0 - e, e - min(rows, cols))
    return max(worst, 0.0)


def one_point_sampler(rng) -> float:
    c = rng.normal(size=3)
    z0 = rng.normal(size=3)
    return max(
        float(np.max(np.abs(euler_integrate(lambda z, t: (c - z) / (1.0 - t), z0, steps) - c)))
        for steps in (1, 4, 64, 250)
    )


CHECKS = (
    Check("gradcheck:matmul", _op_gradcheck(_matmul), 1e-6),
    Check("gradcheck:layer_norm", _op_gradcheck(_layer_norm), 1e-6),
    Check("gradcheck:softmax_gelu", _op_gradcheck(_softmax_gelu), 1e-6),
    Check("gradcheck:cross_entropy", _op_gradcheck(_cross_entropy), 1e-6),
    Check("gradcheck:cosine_similarity", _op_gradcheck(_cosine), 1e-6),
    Check("gradcheck:backbone", backbone_gradcheck, 1e-4),
    Check("equivalence", equivalence_battery, 1e-10),
    Check("bias_variance", bias_variance_battery, 1e-10),
    Check("variance_descent", variance_descent_monotone, 0.0),
    Check("erank:units", erank_units, 1e-9),
    Check("erank:two_value", lambda rng: abs(effective_rank(np.diag([3.0, 1.0])) - 1.754765), 1e-6),
    Check("erank:bounds", erank_bounds, 1e-9),
    Check("sampler:one_point", one_point_sampler, 1e-12),
)


def run_verification(seed: int = 0, checks=CHECKS, progress: bool = False) -> VerificationReport:
    """
    Run every check with its own generator spawned from ``seed``

    Raises:
        VerificationFailure: when any check fails; ``report`` holds the pass count.
    """
    report = VerificationReport()
    streams = np.random.SeedSequence(seed).spawn(len(checks))
    for check, stream in tqdm(list(zip(checks, streams)), desc="verify", disable=not progress, leave=False):
        rng = np.random.default_rng(stream)
        try:
            error = check.measure(rng)
        except CHECK_ERRORS as e:
            logger.warning(f"check {check.name} raised: {e}")
            report.failures.append((check.name, str(e)))
            continue
        if np.isfinite(error) and error < check.tolerance:
            report.passed.append(check.name)
            logger.debug(f"check {check.name}: {error:.3e} < {check.tolerance:g}")
        else:
            logger.warning(f"check {check.name} failed: {error:.3e} >= {check.tolerance:g}")
            report.failures.append((check.name, f"error {error:.3e} above {check.tolerance:g}"))

    if not report.ok:
        raise VerificationFailure(f"{len(report.failures)} of {report.total} checks failed",
                                  failures=report.failures, report=report)
    logger.info(f"all {report.total} checks passed")
    return report
