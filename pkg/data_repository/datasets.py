"""
In-memory labelled image datasets.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)


class DatasetError(Exception):
    """Raised for malformed datasets and invalid synthesis parameters"""

    def __init__(self, message, field=None):
        self.message = message
        self.field = field

        detail = ""
        if field is not None:
            detail += f" (field '{field}')"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class ImageDataset:
    """Images (N, C, H, W) in [0, 1] with integer labels (N,)"""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got shape {self.images.shape}", field="images")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"{self.images.shape[0]} images but labels of shape {self.labels.shape}",
                               field="labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels outside [0, {self.class_count})", field="labels")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def batch(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.images[indices], self.labels[indices]

    def sample_batch(self, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
        """Uniform draw without replacement (with replacement if ``size`` exceeds the set)."""
        replace = size > len(self)
        return self.batch(rng.choice(len(self), size=size, replace=replace))

    def split(self, holdout: float, seed: int = 0) -> Tuple["ImageDataset", "ImageDataset"]:
        """Deterministic (train, held-out) split"""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - int(round(holdout * len(self)))
        train, held = order[:cut], order[cut:]
        return (
            ImageDataset(self.images[train], self.labels[train], self.class_count, f"{self.name}-train"),
            ImageDataset(self.images[held], self.labels[held], self.class_count, f"{self.name}-heldout"),
        )

    def class_means(self) -> np.ndarray:
        """(class_count, C, H, W) mean image per class; NaN rows for absent classes"""
        means = np.full((self.class_count,) + self.image_shape, np.nan)
        for k in range(self.class_count):
            members = self.images[self.labels == k]
            if len(members):
                means[k] = members.mean(axis=0)
        return means
