"""
EMA target encoder

The shadow holds untracked copies of the encoder-path parameters, so no
tape ever records an op on them and backward never assigns them a
gradient.
"""
import logging
import math
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

from autodiff.tensor import Tensor, constant

from .config import NetworkError

logger = logging.getLogger(__name__)

DEFAULT_DECAY = 0.99


class TargetEncoder:
    def __init__(self, shadow: Mapping[str, np.ndarray], decay: float = DEFAULT_DECAY):
        self.params: Dict[str, Tensor] = OrderedDict(
            (name, constant(value)) for name, value in shadow.items()
        )
        self.decay = decay

    @classmethod
    def from_model(cls, model, decay: float = DEFAULT_DECAY) -> "TargetEncoder":
        """Shadow initialized as an exact copy of the online encoder path"""
        return cls(OrderedDict((name, model.params[name].data) for name in model.encoder_names()), decay)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, t.data) for name, t in self.params.items())

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        for name in self.params:
            if name not in arrays:
                raise NetworkError("EMA state lacks a shadow parameter", operation="load_state_arrays",
                                   expected=name, actual=None)
            self.params[name] = constant(arrays[name])


def ema_update(online: Mapping[str, Tensor], target: TargetEncoder, m: float = None) -> TargetEncoder:
    """
    θ₂ ← m·θ₂ + (1−m)·θ₁ for every shadow parameter

    Args:
        online: online parameters by name (must cover every shadow name)
        target: the EMA target, updated in place and returned
        m: decay; defaults to ``target.decay``
    """
    m = target.decay if m is None else float(m)
    if not 0.0 <= m < 1.0:
        raise NetworkError("EMA decay must lie in [0, 1)", operation="ema_update", expected="[0, 1)", actual=m)
    for name, shadow in target.params.items():
        if name not in online:
            raise NetworkError("online parameters lack a shadowed name", operation="ema_update",
                               expected=name, actual=None)
        theta = online[name].data
        if theta.shape != shadow.shape:
            raise NetworkError(f"shape mismatch for '{name}'", operation="ema_update",
                               expected=shadow.shape, actual=theta.shape)
        target.params[name] = constant(m * shadow.data + (1.0 - m) * theta)
    return target


def ema_momentum(step: int, total_steps: int, schedule: str = "constant",
                 start: float = DEFAULT_DECAY, end: float = 0.999) -> float:
    """
    Decay for a given step

    ``constant`` returns ``start``; ``cosine`` ramps from ``start`` at step
    0 to ``end`` at ``total_steps``.
    """
    if schedule == "constant":
        return start
    if schedule == "cosine":
        progress = min(max(step / max(total_steps, 1), 0.0), 1.0)
        return end - (end - start) * (1.0 + math.cos(math.pi * progress)) / 2.0
    raise NetworkError("unknown EMA schedule", operation="ema_momentum",
                       expected="constant|cosine", actual=schedule)
