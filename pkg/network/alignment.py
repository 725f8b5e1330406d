"""
Frozen stand-in teacher for layer alignment.

A fixed random two-layer patch feature extractor; its outputs are plain
arrays and never receive gradients.
"""
import logging

import numpy as np

from autodiff.tensor import constant

from . import layers
from .config import ModelConfig

logger = logging.getLogger(__name__)


class FrozenTeacher:
    def __init__(self, config: ModelConfig, seed: int = 1234):
        self.config = config
        rng = np.random.default_rng(seed)
        width = 2 * config.teacher_dim
        self.w1 = rng.standard_normal((config.patch_dim, width)) / np.sqrt(config.patch_dim)
        self.w2 = rng.standard_normal((width, config.teacher_dim)) / np.sqrt(width)

    def features(self, x) -> np.ndarray:
        """(B, C, H, W) images -> (B, tokens, teacher_dim) patch features"""
        patches = layers.patchify_array(np.asarray(getattr(x, "data", x), dtype=np.float64),
                                        self.config.patch_size)
        hidden = patches @ self.w1
        hidden = np.maximum(hidden, 0.0) + 0.1 * np.minimum(hidden, 0.0)
        return hidden @ self.w2

    def __call__(self, x):
        return constant(self.features(x))
