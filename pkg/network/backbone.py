"""
The unified transformer: one trunk that encodes images to latents,
diffuses noisy latents, and feeds every head.

Parameter names are dotted paths ("trunk.0.attn.qkv.weight"); the
encoder path is everything under ``ENCODER_PREFIXES`` and is what the
EMA target shadows.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from autodiff import functional as F
from autodiff.tensor import Parameter, Tensor, constant, stop_gradient

from . import layers
from .config import ModelConfig, NetworkError

logger = logging.getLogger(__name__)

ENCODER_PREFIXES = ("patch_embed.", "pos_embed", "registers", "trunk.", "latent_out.")


@dataclass
class EncodePass:
    z: Tensor
    hidden: List[Tensor]


@dataclass
class TrunkPass:
    """One conditioned trunk pass shared by the diffusion, velocity and decoder heads"""

    features: Tensor
    hidden: List[Tensor]
    cond: Tensor


def is_encoder_name(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


class UnifiedBackbone:
    """
    Weight-shared transformer with encoder, decoder, clean-latent,
    velocity, classification and alignment heads.

    Args:
        config: model dimensions
        seed: seed of the initialization stream
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: Dict[str, Parameter] = OrderedDict()
        self._initialize(np.random.default_rng(seed))
        logger.debug(f"initialized backbone with {self.parameter_count()} parameters")

    def _initialize(self, rng: np.random.Generator):
        c = self.config
        hidden, std = c.hidden_dim, c.init_std
        mlp_hidden = c.mlp_ratio * hidden
        arrays = OrderedDict()

        def add_linear(prefix, fan_in, fan_out, zero=False, bias=True):
            for key, value in layers.linear_init(rng, fan_in, fan_out, std, zero=zero).items():
                if key == "bias" and not bias:
                    continue
                arrays[f"{prefix}.{key}"] = value

        def add_block(prefix):
            for key, value in layers.block_init(rng, hidden, mlp_hidden, std).items():
                arrays[f"{prefix}.{key}"] = value

        add_linear("patch_embed.proj", c.patch_dim, hidden)
        add_linear("patch_embed.point", hidden, hidden)
        arrays["pos_embed"] = layers.trunc_normal(rng, (1, c.token_count, hidden), std)
        arrays["registers"] = layers.trunc_normal(rng, (1, c.register_count, hidden), std)
        for i in range(c.trunk_layers):
            add_block(f"trunk.{i}")
        add_linear("latent_out", hidden, c.latent_dim)

        add_linear("latent_in", c.latent_dim, hidden)
        add_linear("time_mlp.0", c.time_embed_dim, hidden)
        add_linear("time_mlp.2", hidden, hidden)
        arrays["class_embed"] = layers.trunc_normal(rng, (c.class_count + 1, hidden), std)

        for head in ("clean_head", "velocity_head"):
            add_block(f"{head}.block")
            add_linear(f"{head}.out", hidden, c.latent_dim)

        add_linear("decoder.point", hidden, hidden)
        add_linear("decoder.proj", hidden, c.patch_dim)
        add_linear("classifier", c.latent_dim, c.class_count)
        add_linear("align_proj", hidden, c.teacher_dim, bias=False)

        for name, value in arrays.items():
            self.params[name] = Parameter(name, value)

    # Bookkeeping

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encoder_names(self) -> List[str]:
        return [name for name in self.params if is_encoder_name(name)]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        missing = [name for name in self.params if name not in arrays]
        if missing:
            raise NetworkError("checkpoint lacks model parameters", operation="load_state_arrays",
                               expected=len(self.params), actual=f"missing {missing[:3]}")
        for name, param in self.params.items():
            param.assign(arrays[name])

    def clone(self) -> "UnifiedBackbone":
        """Independent copy for evaluation-only use"""
        copy = UnifiedBackbone.__new__(UnifiedBackbone)
        copy.config = self.config
        copy.params = OrderedDict((name, Parameter(name, p.data)) for name, p in self.params.items())
        return copy

    # Input checks

    def _images(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else constant(x)
        if x.ndim != 4 or x.shape[1:] != self.config.image_shape:
            raise NetworkError("image batch does not match the model", operation="encode",
                               expected=f"(B, {', '.join(map(str, self.config.image_shape))})",
                               actual=x.shape)
        return x

    def _labels(self, labels, batch: int) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.ndim == 0:
            labels = np.full(batch, labels)
        if labels.shape != (batch,) or not np.issubdtype(labels.dtype, np.integer):
            raise NetworkError("labels must be one integer per batch element",
                               operation="diffuse_forward", expected=(batch,), actual=labels.shape)
        if labels.min() < 0 or labels.max() > self.config.null_label:
            raise NetworkError("label out of range", operation="diffuse_forward",
                               expected=f"0..{self.config.null_label}",
                               actual=int(labels.max()) if labels.max() > self.config.null_label else int(labels.min()))
        return labels.astype(np.int64)

    def _times(self, t, batch: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(batch, float(t))
        if t.shape != (batch,):
            raise NetworkError("time must be scalar or one value per batch element",
                               operation="diffuse_forward", expected=(batch,), actual=t.shape)
        if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
            raise NetworkError("time outside [0, 1]", operation="diffuse_forward",
                               expected="[0, 1]", actual=float(t[(t < 0.0) | (t > 1.0) | ~np.isfinite(t)][0]))
        return t

    # Trunk

    def _with_registers(self, h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
        if self.config.register_count == 0:
            return h
        batch, _, hidden = h.shape
        regs = F.broadcast_to(params["registers"], (batch, self.config.register_count, hidden))
        return F.concat([h, regs], axis=1)

    def _run_trunk(self, h: Tensor, params: Mapping[str, Tensor], cond: Optional[Tensor]):
        tokens = self.config.token_count
        hidden_states = []
        for i in range(self.config.trunk_layers):
            h = layers.transformer_block(h, params, f"trunk.{i}", self.config.attention_heads, cond=cond)
            hidden_states.append(h[:, :tokens])
        return h[:, :tokens], hidden_states

    def encode_pass(self, x, params: Mapping[str, Tensor] = None) -> EncodePass:
        """
        Image batch -> token latents, keeping the per-layer token features

        ``params`` defaults to the online parameters; the EMA target passes
        its shadow mapping.
        """
        params = self.params if params is None else params
        x = self._images(x)
        patches = layers.patchify(x, self.config.patch_size)
        h = F.gelu(layers.linear(patches, params, "patch_embed.proj"))
        h = layers.linear(h, params, "patch_embed.point")
        h = F.add(h, params["pos_embed"])
        features, hidden_states = self._run_trunk(self._with_registers(h, params), params, cond=None)
        z = layers.linear(F.layer_norm(features), params, "latent_out")
        return EncodePass(z=z, hidden=hidden_states)

    def encode(self, x) -> Tensor:
        return self.encode_pass(x).z

    def encode_target(self, x, target) -> Tensor:
        """Target-encoder latents; built from untracked shadow tensors."""
        return stop_gradient(self.encode_pass(x, params=target.params).z)

    def condition(self, t, labels, batch: int) -> Tensor:
        c = self.config
        t = self._times(t, batch)
        labels = self._labels(labels, batch)
        emb = F.sinusoidal_time_embed(constant(t), dim=c.time_embed_dim)
        emb = layers.linear(F.gelu(layers.linear(emb, self.params, "time_mlp.0")), self.params, "time_mlp.2")
        return F.add(emb, F.embedding_lookup(self.params["class_embed"], labels))

    def diffuse_forward(self, z_t, t, labels) -> TrunkPass:
        """
        One conditioned trunk pass over noisy latents

        Args:
            z_t: (B, tokens, latent_dim) noisy latents
            t: scalar or (B,) times in [0, 1]
            labels: scalar or (B,) class indices; ``config.null_label`` is unconditional

        Returns:
            TrunkPass with the token features, per-layer features and the
            conditioning vector.
        """
        c = self.config
        z_t = z_t if isinstance(z_t, Tensor) else constant(z_t)
        if z_t.ndim != 3 or z_t.shape[1:] != (c.token_count, c.latent_dim):
            raise NetworkError("noisy latents do not match the model", operation="diffuse_forward",
                               expected=f"(B, {c.token_count}, {c.latent_dim})", actual=z_t.shape)
        batch = z_t.shape[0]
        cond = self.condition(t, labels, batch)
        h = F.add(layers.linear(z_t, self.params, "latent_in"), self.params["pos_embed"])
        features, hidden_states = self._run_trunk(self._with_registers(h, self.params), self.params, cond)
        return TrunkPass(features=features, hidden=hidden_states, cond=cond)

    # Heads

    def _head(self, prefix: str, features: Tensor, cond: Tensor) -> Tensor:
        h = layers.transformer_block(features, self.params, f"{prefix}.block",
                                     self.config.attention_heads, cond=cond)
        return layers.linear(F.layer_norm(h), self.params, f"{prefix}.out")

    def predict_clean(self, trunk: TrunkPass) -> Tensor:
        """Main diffusion head: one conditioned block and a projection to latents."""
        return self._head("clean_head", trunk.features, trunk.cond)

    def predict_velocity(self, trunk: TrunkPass) -> Tensor:
        """Sampling head; reads detached features so it never trains the trunk."""
        return self._head("velocity_head", stop_gradient(trunk.features), stop_gradient(trunk.cond))

    def decode(self, trunk: TrunkPass) -> Tensor:
        c = self.config
        h = F.gelu(layers.linear(F.layer_norm(trunk.features), self.params, "decoder.point"))
        patches = layers.linear(h, self.params, "decoder.proj")
        return layers.unpatchify(patches, c.patch_size, c.channels, c.image_size)

    def classify(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else constant(z)
        return layers.linear(F.mean(z, axis=1), self.params, "classifier")

    def align_features(self, layer_index: int, hidden: List[Tensor], teacher_features) -> Tensor:
        """Negative mean cosine between projected layer features and teacher features"""
        if not 0 <= layer_index < self.config.trunk_layers:
            raise NetworkError("alignment layer out of range", operation="align_features",
                               expected=f"0..{self.config.trunk_layers - 1}", actual=layer_index)
        projected = layers.linear(hidden[layer_index], self.params, "align_proj")
        teacher = teacher_features if isinstance(teacher_features, Tensor) else constant(teacher_features)
        if projected.shape != teacher.shape:
            raise NetworkError("teacher features do not match projected features",
                               operation="align_features", expected=projected.shape, actual=teacher.shape)
        return F.scalar_mul(F.mean(F.cosine_similarity(projected, stop_gradient(teacher))), -1.0)
