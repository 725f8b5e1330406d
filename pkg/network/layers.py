"""
Functional transformer layers.

Every layer reads its weights from a ``name -> Tensor`` mapping under a
dotted prefix, so the online model (``Parameter`` values) and the EMA
target (plain constant tensors) run the same code.
"""
import logging
import math
from typing import Dict, Mapping, Optional

import numpy as np
from scipy.stats import truncnorm

from autodiff import functional as F
from autodiff.tensor import Tensor

from .config import NetworkError

logger = logging.getLogger(__name__)

Params = Mapping[str, Tensor]

# shift, scale, gate for attention and for the MLP
MODULATION_CHUNKS = 6


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def linear_init(rng, fan_in: int, fan_out: int, std: float, zero: bool = False) -> Dict[str, np.ndarray]:
    weight = np.zeros((fan_in, fan_out)) if zero else trunc_normal(rng, (fan_in, fan_out), std)
    return {"weight": weight, "bias": np.zeros(fan_out)}


def block_init(rng, hidden: int, mlp_hidden: int, std: float) -> Dict[str, np.ndarray]:
    """Initial arrays of one transformer block, keyed relative to its prefix"""
    arrays = {}
    for sub, (fan_in, fan_out, zero) in {
        "attn.qkv": (hidden, 3 * hidden, False),
        "attn.proj": (hidden, hidden, False),
        "mlp.fc1": (hidden, mlp_hidden, False),
        "mlp.fc2": (mlp_hidden, hidden, False),
        "ada": (hidden, MODULATION_CHUNKS * hidden, True),
    }.items():
        for key, value in linear_init(rng, fan_in, fan_out, std, zero=zero).items():
            arrays[f"{sub}.{key}"] = value
    return arrays


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    out = F.matmul(x, params[f"{prefix}.weight"])
    bias = params.get(f"{prefix}.bias")
    return out if bias is None else F.add(out, bias)


def modulate(h: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """h·(1 + scale) + shift"""
    return F.add(F.add(h, F.mul(h, scale)), shift)


def gated(x: Tensor, branch: Tensor, gate: Optional[Tensor]) -> Tensor:
    """Residual add with a (1 + gate) multiplier on the branch"""
    if gate is None:
        return F.add(x, branch)
    return F.add(x, F.add(branch, F.mul(branch, gate)))


def attention(x: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    batch, seq, hidden = x.shape
    head_dim = hidden // heads
    qkv = linear(x, params, f"{prefix}.qkv")
    qkv = F.transpose(F.reshape(qkv, (batch, seq, 3, heads, head_dim)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]

    scores = F.scalar_mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    mixed = F.matmul(F.softmax(scores, axis=-1), v)
    mixed = F.reshape(F.transpose(mixed, (0, 2, 1, 3)), (batch, seq, hidden))
    return linear(mixed, params, f"{prefix}.proj")


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(F.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def modulation(cond: Tensor, params: Params, prefix: str, hidden: int):
    """Split the conditioning projection into six (B, 1, hidden) vectors."""
    batch = cond.shape[0]
    mod = linear(F.gelu(cond), params, f"{prefix}.ada")
    mod = F.reshape(mod, (batch, 1, MODULATION_CHUNKS * hidden))
    return [mod[:, :, i * hidden:(i + 1) * hidden] for i in range(MODULATION_CHUNKS)]


def transformer_block(x: Tensor, params: Params, prefix: str, heads: int,
                      cond: Optional[Tensor] = None) -> Tensor:
    """
    Pre-norm attention + MLP block

    With ``cond`` the normalized inputs are scale-shift modulated and both
    branches gated by (1 + g); without it the block is unmodulated. The
    modulation weights start at zero, so the two forms agree at init.
    """
    hidden = x.shape[-1]
    if cond is None:
        x = F.add(x, attention(F.layer_norm(x), params, f"{prefix}.attn", heads))
        return F.add(x, mlp(F.layer_norm(x), params, f"{prefix}.mlp"))

    shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = modulation(cond, params, prefix, hidden)
    h = modulate(F.layer_norm(x), shift_a, scale_a)
    x = gated(x, attention(h, params, f"{prefix}.attn", heads), gate_a)
    h = modulate(F.layer_norm(x), shift_m, scale_m)
    return gated(x, mlp(h, params, f"{prefix}.mlp"), gate_m)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, tokens, C·patch·patch), row-major over the grid"""
    if x.ndim != 4:
        raise NetworkError("images must be (batch, channels, height, width)", operation="patchify",
                           expected="4 dims", actual=x.shape)
    batch, channels, height, width = x.shape
    gh, gw = height // patch, width // patch
    t = F.reshape(x, (batch, channels, gh, patch, gw, patch))
    t = F.transpose(t, (0, 2, 4, 1, 3, 5))
    return F.reshape(t, (batch, gh * gw, channels * patch * patch))


def unpatchify(tokens: Tensor, patch: int, channels: int, size: int) -> Tensor:
    """Inverse of :func:`patchify` for square images"""
    batch = tokens.shape[0]
    grid = size // patch
    t = F.reshape(tokens, (batch, grid, grid, channels, patch, patch))
    t = F.transpose(t, (0, 3, 1, 4, 2, 5))
    return F.reshape(t, (batch, channels, size, size))


def patchify_array(x: np.ndarray, patch: int) -> np.ndarray:
    """Numpy twin of :func:`patchify` for data-side code."""
    batch, channels, height, width = x.shape
    gh, gw = height // patch, width // patch
    t = x.reshape(batch, channels, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(batch, gh * gw, channels * patch * patch)
