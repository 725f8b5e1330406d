"""
Augmentation pipeline producing the online view x⁺ from x.

Images are (channels, height, width) arrays with pixels in [0, 1]. The
pipeline applies photometric jitter, then Gaussian blur, then patch
masking, each with its own probability.
"""
import logging
import math
from dataclasses import dataclass, fields
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 3


class AugmentationError(Exception):
    """Raised for invalid augmentation settings"""

    def __init__(self, message, field=None):
        self.message = message
        self.field = field

        detail = ""
        if field is not None:
            detail += f" in field '{field}'"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class AugmentConfig:
    mask_ratio: float = 0.75
    mask_fill: float = 0.0
    mask_prob: float = 1.0
    blur_prob: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 1.5)
    jitter_prob: float = 0.8
    brightness: Tuple[float, float] = (-0.2, 0.2)
    contrast: Tuple[float, float] = (0.8, 1.2)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.5
    patch_size: int = 4

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_prob"):
                value = getattr(self, f.name)
                if not 0.0 <= value <= 1.0:
                    raise AugmentationError(f"probability {value} outside [0, 1]", field=f.name)
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise AugmentationError(f"mask ratio {self.mask_ratio} outside [0, 1]", field="mask_ratio")
        for name in ("blur_sigma", "brightness", "contrast"):
            low, high = getattr(self, name)
            if low > high:
                raise AugmentationError(f"range ({low}, {high}) is not ordered", field=name)
        if self.blur_sigma[0] < 0:
            raise AugmentationError("blur sigma must be non-negative", field="blur_sigma")
        if self.patch_size < 1:
            raise AugmentationError("patch size must be positive", field="patch_size")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentConfig":
        """Configuration whose pipeline is the identity"""
        values = dict(mask_prob=0.0, blur_prob=0.0, jitter_prob=0.0, solarize_prob=0.0)
        values.update(overrides)
        return cls(**values)


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise AugmentationError(f"expected a (channels, height, width) image, got shape {x.shape}", field="x")
    return x


def masked_patch_count(ratio: float, patch_count: int) -> int:
    """round(ratio · patch_count), halves rounded up"""
    return int(math.floor(ratio * patch_count + 0.5))


def _check_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise AugmentationError(f"expected a (batch, channels, height, width) array, got shape {images.shape}",
                                field="images")
    return images


def _mask_batch(x: np.ndarray, ratio: float, rng: np.random.Generator, patch_size: int, fill: float,
                active: np.ndarray) -> np.ndarray:
    """Mask round(ratio·patches) grid patches of every active image; the draw covers every image."""
    batch, _, height, width = x.shape
    gh, gw = height // patch_size, width // patch_size
    count = masked_patch_count(ratio, gh * gw)
    order = np.argsort(rng.uniform(size=(batch, gh * gw)), axis=1)
    chosen = np.zeros((batch, gh * gw), dtype=bool)
    np.put_along_axis(chosen, order[:, :count], True, axis=1)
    chosen &= np.asarray(active, dtype=bool)[:, None]
    cells = chosen.reshape(batch, gh, gw).repeat(patch_size, axis=1).repeat(patch_size, axis=2)
    pixels = np.zeros((batch, height, width), dtype=bool)
    pixels[:, :gh * patch_size, :gw * patch_size] = cells
    return np.where(pixels[:, None], fill, x)


def random_mask(x, ratio: float, rng: np.random.Generator, patch_size: int = 4,
                fill: float = 0.0) -> np.ndarray:
    """Replace round(ratio·patches) grid patches, chosen without replacement, by ``fill``."""
    x = _check_image(x)
    if not 0.0 <= ratio <= 1.0:
        raise AugmentationError(f"mask ratio {ratio} outside [0, 1]", field="mask_ratio")
    return _mask_batch(x[None], ratio, rng, patch_size, fill, np.ones(1, dtype=bool))[0]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(x, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3σ), reflect padding."""
    x = _check_image(x)
    if sigma < 0:
        raise AugmentationError(f"blur sigma {sigma} is negative", field="blur_sigma")
    if sigma == 0:
        logger.warning("gaussian_blur called with sigma 0; returning the input unchanged")
        return x.copy()
    kernel = gaussian_kernel(sigma)
    out = correlate1d(x, kernel, axis=1, mode="reflect")
    return correlate1d(out, kernel, axis=2, mode="reflect")


def _jitter_batch(x: np.ndarray, brightness: np.ndarray, contrast: np.ndarray,
                  solarize: np.ndarray, threshold: float) -> np.ndarray:
    column = (slice(None), None, None, None)
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    out = np.clip(contrast[column] * (x - mean) + mean + brightness[column], 0.0, 1.0)
    return np.where(solarize[column] & (out > threshold), 1.0 - out, out)


def photometric_jitter(x, brightness_delta: float = 0.0, contrast_scale: float = 1.0,
                       solarize_threshold: Optional[float] = None) -> np.ndarray:
    """
    Grayscale colour jitter

    Contrast scales about the image mean, brightness shifts, the result is
    clamped to [0, 1], then pixels above ``solarize_threshold`` (when given)
    are inverted.
    """
    x = _check_image(x)
    return _jitter_batch(
        x[None],
        np.array([brightness_delta], dtype=np.float64),
        np.array([contrast_scale], dtype=np.float64),
        np.array([solarize_threshold is not None]),
        0.0 if solarize_threshold is None else solarize_threshold,
    )[0]


def _augment_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    batch = images.shape[0]
    fires = rng.uniform(size=(batch, 4))
    brightness = rng.uniform(*config.brightness, size=batch)
    contrast = rng.uniform(*config.contrast, size=batch)
    sigma = rng.uniform(*config.blur_sigma, size=batch)

    jitter = fires[:, 0] < config.jitter_prob
    solarize = fires[:, 1] < config.solarize_prob
    touched = jitter | solarize
    out = images
    if touched.any():
        # solarize without jitter keeps brightness 0 and contrast 1
        jittered = _jitter_batch(images, np.where(jitter, brightness, 0.0), np.where(jitter, contrast, 1.0),
                                 solarize, config.solarize_threshold)
        out = np.where(touched[:, None, None, None], jittered, images)
    blurred = np.flatnonzero(fires[:, 2] < config.blur_prob)
    if blurred.size:
        out = out.copy()
        for index in blurred:
            out[index] = gaussian_blur(out[index], sigma[index])
    out = _mask_batch(out, config.mask_ratio, rng, config.patch_size, config.mask_fill,
                      fires[:, 3] < config.mask_prob)
    return np.clip(out, 0.0, 1.0)


def augment(x, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """
    jitter -> blur -> mask, each applied with its configured probability

    Every random draw is taken whether or not its op fires, so the stream
    position after the call does not depend on the outcome.
    """
    return _augment_batch(_check_image(x)[None], config, rng)[0]


def augment_rng(seed: int, step: int) -> np.random.Generator:
    """Augmentation stream of one run seed at one step"""
    return np.random.default_rng(np.random.SeedSequence(entropy=[seed, AUGMENT_STREAM], spawn_key=(step,)))


def augment_batch(images, config: AugmentConfig, step: int = 0, seed: int = 0) -> np.ndarray:
    """Augment a (B, C, H, W) batch in one pass; each element gets its own draws from the step's stream."""
    return _augment_batch(_check_batch(images), config, augment_rng(seed, step))
