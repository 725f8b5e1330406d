"""
Procedural shape datasets.

Each class is a shape family drawn at a random position, size and
intensity on a dark background. Classes beyond the ten base families
reuse a family with a thicker stroke.
"""
import logging
from typing import Callable, Dict, List

import numpy as np

from .datasets import DatasetError, ImageDataset

logger = logging.getLogger(__name__)

Shape = Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]


def _horizontal_bars(dx, dy, radius, stroke):
    period = max(radius * 0.8, 2.0)
    return (np.abs(dx) <= radius) & (np.abs(dy) <= radius) & ((dy + radius) % period < stroke)


def _vertical_bars(dx, dy, radius, stroke):
    return _horizontal_bars(dy, dx, radius, stroke)


def _disk(dx, dy, radius, stroke):
    return np.hypot(dx, dy) <= radius


def _ring(dx, dy, radius, stroke):
    return np.abs(np.hypot(dx, dy) - radius) <= stroke / 2.0


def _cross(dx, dy, radius, stroke):
    arm = (np.abs(dx) <= radius) & (np.abs(dy) <= stroke / 2.0)
    return arm | ((np.abs(dy) <= radius) & (np.abs(dx) <= stroke / 2.0))


def _checker(dx, dy, radius, stroke):
    cell = max(radius / 2.0, 1.0)
    inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    return inside & ((np.floor((dx + radius) / cell) + np.floor((dy + radius) / cell)) % 2 == 0)


def _diagonal(dx, dy, radius, stroke):
    inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    return inside & (np.abs(dx - dy) <= stroke)


def _square_outline(dx, dy, radius, stroke):
    edge = np.maximum(np.abs(dx), np.abs(dy))
    return (edge <= radius) & (edge >= radius - stroke)


def _triangle(dx, dy, radius, stroke):
    return (np.abs(dy) <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)


def _blob(dx, dy, radius, stroke):
    return np.exp(-(dx * dx + dy * dy) / (2.0 * (radius / 2.0) ** 2))


SHAPE_FAMILIES: Dict[str, Shape] = {
    "horizontal_bars": _horizontal_bars,
    "vertical_bars": _vertical_bars,
    "disk": _disk,
    "ring": _ring,
    "cross": _cross,
    "checker": _checker,
    "diagonal": _diagonal,
    "square_outline": _square_outline,
    "triangle": _triangle,
    "blob": _blob,
}

FAMILY_NAMES: List[str] = list(SHAPE_FAMILIES)


def render_shape(family: int, size: int, rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """One randomized (channels, size, size) drawing of a shape family"""
    shape = SHAPE_FAMILIES[FAMILY_NAMES[family % len(FAMILY_NAMES)]]
    thickness = 1 + family // len(FAMILY_NAMES)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = (size - 1) / 2.0 + rng.uniform(-size / 8.0, size / 8.0, size=2)
    radius = rng.uniform(0.22, 0.32) * size
    stroke = max(size / 16.0, 1.0) * thickness
    intensity = rng.uniform(0.6, 1.0)

    mask = np.asarray(shape(xx - cx, yy - cy, radius, stroke), dtype=np.float64)
    image = intensity * mask + rng.uniform(0.0, 0.05, size=(size, size))
    tint = 1.0 - 0.15 * np.arange(channels) / max(channels, 1)
    return np.clip(image[None] * tint[:, None, None], 0.0, 1.0)


def synth_dataset(class_count: int, samples_per_class: int, image_size: int, seed: int,
                  channels: int = 1) -> ImageDataset:
    """
    Deterministic procedural dataset

    Args:
        class_count: number of classes (>= 2)
        samples_per_class: images per class
        image_size: square image side in pixels
        seed: generator seed; identical seeds give bitwise-identical data
        channels: image channels

    Returns:
        ImageDataset of class_count * samples_per_class images, shuffled.
    """
    if class_count < 2:
        raise DatasetError(f"class_count must be at least 2, got {class_count}", field="class_count")
    if samples_per_class < 1 or image_size < 4:
        raise DatasetError("need at least one sample per class and images of side >= 4", field="samples_per_class")

    rng = np.random.default_rng(seed)
    total = class_count * samples_per_class
    images = np.empty((total, channels, image_size, image_size))
    labels = np.tile(np.arange(class_count), samples_per_class)
    for i, label in enumerate(labels):
        images[i] = render_shape(int(label), image_size, rng, channels)

    order = rng.permutation(total)
    logger.info(f"synthesized {total} images of {class_count} shape classes at {image_size}px (seed {seed})")
    return ImageDataset(images[order], labels[order].astype(np.int64), class_count, name=f"synthetic-{seed}")
