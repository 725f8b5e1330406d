"""
Decoupled-weight-decay Adam and global-norm clipping over named parameters
"""
import logging
from typing import Dict, Tuple

import numpy as np

from .tensor import Parameter

logger = logging.getLogger(__name__)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float, float]:
    """
    Scale all gradients so their joint L2 norm is at most ``max_norm``

    Returns:
        (clipped gradients, norm before clipping, norm after clipping)
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm, norm
    scale = max_norm / norm
    clipped = {name: g * scale for name, g in grads.items()}
    return clipped, norm, global_norm(clipped)


class AdamW:
    """Adam with decoupled weight decay on every parameter of rank >= 2"""

    def __init__(
        self,
        params: Dict[str, Parameter],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            value = param.data
            if self.weight_decay and value.ndim >= 2:
                value = value * (1.0 - self.lr * self.weight_decay)
            param.assign(value - self.lr * update)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moments and step count, flattened for checkpointing."""
        state = {"step": np.array([float(self.t)])}
        for name in self.params:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_arrays(self, state: Dict[str, np.ndarray]):
        self.t = int(state["step"][0])
        for name in self.params:
            self.m[name] = np.array(state[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"v/{name}"], dtype=np.float64)
