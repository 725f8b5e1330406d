"""
Euler sampling of the learned velocity field, from noise at t = 0 to
latents at t = 1, with optional classifier-free guidance.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from autodiff.tensor import constant
from objectives.flow import T_MAX, velocity_from_clean

logger = logging.getLogger(__name__)

SOURCES = ("velocity", "clean")

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


class SamplerError(Exception):
    """Raised for invalid sampling settings or a model that cannot be sampled"""

    def __init__(self, message, field=None):
        self.message = message
        self.field = field

        detail = ""
        if field is not None:
            detail += f" (field '{field}')"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class SampleConfig:
    """
    Args:
        steps: Euler steps N
        guidance_scale: s; 1 samples the conditional field alone
        label: class to sample, or None for unconditional sampling
        batch: number of samples
        seed: seed of the initial noise
        source: "velocity" (detached velocity head) or "clean" (velocity
            recovered from the clean-latent head)
    """

    steps: int = 64
    guidance_scale: float = 1.0
    label: Optional[int] = None
    batch: int = 16
    seed: int = 0
    source: str = "velocity"

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerError(f"steps must be at least 1, got {self.steps}", field="steps")
        if not np.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise SamplerError(f"guidance scale must be >= 0, got {self.guidance_scale}", field="guidance_scale")
        if self.batch < 1:
            raise SamplerError("batch must be positive", field="batch")
        if self.source not in SOURCES:
            raise SamplerError(f"unknown velocity source '{self.source}'", field="source")

    @property
    def guided(self) -> bool:
        return self.label is not None and self.guidance_scale != 1.0


@dataclass
class SampleResult:
    latents: np.ndarray
    labels: np.ndarray
    images: Optional[np.ndarray] = None
    trajectory: Optional[List[np.ndarray]] = None


def time_grid(steps: int) -> np.ndarray:
    """t_k = k/N for k = 0..N; velocities are evaluated at t_0..t_{N-1} only."""
    if steps < 1:
        raise SamplerError(f"steps must be at least 1, got {steps}", field="steps")
    return np.arange(steps + 1, dtype=np.float64) / steps


def cfg_velocity(v_cond, v_uncond, s: float) -> np.ndarray:
    """v_uncond + s·(v_cond − v_uncond); s = 1 and s = 0 return the branch itself."""
    v_cond, v_uncond = np.asarray(v_cond), np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise SamplerError(f"branch shapes differ: {v_cond.shape} vs {v_uncond.shape}", field="guidance_scale")
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def euler_integrate(velocity: VelocityFn, z0: np.ndarray, steps: int,
                    keep_trajectory: bool = False):
    """
    z^{k+1} = z^k + (1/N)·v(z^k, t_k)

    Returns:
        z^N, or (z^N, [z^0, ..., z^N]) with ``keep_trajectory``.
    """
    grid = time_grid(steps)
    dt = 1.0 / steps
    z = np.array(z0, dtype=np.float64)
    trajectory = [z.copy()] if keep_trajectory else None
    for k in range(steps):
        v = np.asarray(velocity(z, float(grid[k])), dtype=np.float64)
        if v.shape != z.shape:
            raise SamplerError(f"velocity of shape {v.shape} for latents of shape {z.shape}", field="source")
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            raise SamplerError(f"non-finite latents after step {k + 1}", field="steps")
        if keep_trajectory:
            trajectory.append(z.copy())
    return (z, trajectory) if keep_trajectory else z


def head_velocity(model, z: np.ndarray, t: float, labels: np.ndarray, source: str) -> np.ndarray:
    """One model evaluation of the velocity at (z, t)"""
    trunk = model.diffuse_forward(constant(z), t, labels)
    if source == "velocity":
        return model.predict_velocity(trunk).data
    zhat = model.predict_clean(trunk)
    return velocity_from_clean(zhat, z, min(t, T_MAX)).data


def build_velocity_fn(model, config: SampleConfig, labels: np.ndarray) -> VelocityFn:
    """Velocity field for the configured source, guided when the config asks for it"""
    null = np.full_like(labels, model.config.null_label)

    def velocity(z: np.ndarray, t: float) -> np.ndarray:
        v_cond = head_velocity(model, z, t, labels, config.source)
        if not config.guided:
            return v_cond
        return cfg_velocity(v_cond, head_velocity(model, z, t, null, config.source), config.guidance_scale)

    return velocity


def check_parameters(model):
    bad = [name for name, p in model.params.items() if not np.all(np.isfinite(p.data))]
    if bad:
        raise SamplerError(f"model has non-finite parameters: {bad[:3]}", field="checkpoint")


def decode_latents(model, latents: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Decoder images of clean latents, read through a trunk pass at t = t_max"""
    trunk = model.diffuse_forward(constant(latents), T_MAX, labels)
    return model.decode(trunk).data


def euler_sample(model, config: SampleConfig, decode: bool = True,
                 keep_trajectory: bool = False) -> SampleResult:
    """
    Sample latents (and decoded images) from a trained model

    Args:
        model: a UnifiedBackbone
        config: sampling settings
        decode: also decode the final latents to images
        keep_trajectory: keep every intermediate z^k

    Returns:
        SampleResult with (batch, tokens, latent_dim) latents.
    """
    check_parameters(model)
    c = model.config
    if config.label is not None and not 0 <= config.label < c.class_count:
        raise SamplerError(f"label {config.label} outside 0..{c.class_count - 1}", field="label")
    labels = np.full(config.batch, c.null_label if config.label is None else config.label, dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    z0 = rng.standard_normal((config.batch, c.token_count, c.latent_dim))
    velocity = build_velocity_fn(model, config, labels)
    result = euler_integrate(velocity, z0, config.steps, keep_trajectory=keep_trajectory)
    latents, trajectory = result if keep_trajectory else (result, None)
    logger.info(f"sampled {config.batch} latents in {config.steps} Euler steps "
                f"(source {config.source}, guidance {config.guidance_scale})")

    images = decode_latents(model, latents, labels) if decode else None
    return SampleResult(latents=latents, labels=labels, images=images, trajectory=trajectory)
