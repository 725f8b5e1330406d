"""
Per-variant loss assembly.

Every variant shares one online encode pass and one conditioned trunk
pass over z_t; the variants differ in where z₂ comes from, which main
loss reads the head output, and which auxiliary terms are switched on.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from augmentation.pipeline import augment_batch
from autodiff import functional as F
from autodiff.tensor import Tensor, constant, stop_gradient
from network.alignment import FrozenTeacher
from network.backbone import UnifiedBackbone
from network.ema import TargetEncoder
from objectives.flow import (
    loss_clean,
    loss_detached_velocity,
    loss_velocity,
    loss_velocity_decoupled,
    predictor_output,
    sample_noisy,
)

from .config import CaseVariant, ExperimentConfig, ExperimentError

logger = logging.getLogger(__name__)

TERM_NAMES = ("main", "velo", "rec", "cls", "repsd", "align")


@dataclass
class LossBreakdown:
    """The weighted total plus every tensor the metrics and wiring checks read"""

    total: Tensor
    terms: Dict[str, Tensor]
    z1: Tensor
    z2: Tensor
    prediction: Tensor
    images: np.ndarray
    online_input: np.ndarray
    t: np.ndarray
    weights: Dict[str, float] = field(default_factory=dict)

    def term_values(self) -> Dict[str, float]:
        return {name: (self.terms[name].item() if name in self.terms else 0.0) for name in TERM_NAMES}


def drop_labels(labels: np.ndarray, rate: float, null_label: int, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by the null class with probability ``rate``."""
    labels = np.asarray(labels, dtype=np.int64)
    dropped = rng.uniform(size=labels.shape) < rate
    return np.where(dropped, null_label, labels)


def _mid_pool(hidden, layer: int) -> Tensor:
    return F.mean(hidden[layer], axis=1)


def assemble_loss(config: ExperimentConfig, images, labels, model: UnifiedBackbone,
                  target: Optional[TargetEncoder], rng: np.random.Generator, step: int = 0,
                  teacher: Optional[FrozenTeacher] = None) -> LossBreakdown:
    """
    Build the variant's total loss on the active tape

    Args:
        config: experiment configuration (variant and loss weights)
        images: (B, C, H, W) clean images x
        labels: (B,) class labels
        model: the online model
        target: EMA target encoder; required exactly for EMA variants
        rng: stream for noise, times and label dropout
        step: training step (selects the augmentation streams)
        teacher: frozen alignment teacher, built on demand for the full variant

    Returns:
        LossBreakdown with the λ-weighted total and the unweighted terms.
    """
    variant = config.variant
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ExperimentError("empty batch", field="batch_size")
    if variant.uses_ema and target is None:
        raise ExperimentError(f"variant '{variant.value}' needs an EMA target encoder", field="variant")

    x_online = images
    if variant.uses_augmentation:
        x_online = augment_batch(images, config.augment, step=step, seed=config.seed)
    online = model.encode_pass(x_online)
    z1 = online.z

    target_hidden = None
    if variant.uses_ema:
        target_pass = model.encode_pass(images, params=target.params)
        z2 = stop_gradient(target_pass.z)
        target_hidden = target_pass.hidden
    elif variant.target_requires_grad:
        z2 = z1
    else:
        z2 = stop_gradient(z1)

    noisy = sample_noisy(z1, rng)
    cond_labels = drop_labels(labels, config.label_dropout, model.config.null_label, rng)
    trunk = model.diffuse_forward(noisy.z_t, noisy.t, cond_labels)
    head = model.predict_clean(trunk)

    terms: Dict[str, Tensor] = {}
    if variant is CaseVariant.VANILLA_JOINT:
        terms["main"] = loss_velocity(head, z2, noisy.eps)
    elif variant is CaseVariant.DECOUPLED:
        terms["main"] = loss_velocity_decoupled(head, z2, noisy.eps)
    else:
        terms["main"] = loss_clean(head, z2, noisy.t, weighted=False)

    terms["rec"] = F.mse(model.decode(trunk), constant(images))

    if variant.auxiliary_losses:
        terms["velo"] = loss_detached_velocity(model.predict_velocity(trunk), z2, noisy.eps)
        cls_input = z1 if config.classify_from == "online" else z2
        terms["cls"] = F.cross_entropy_with_logits(model.classify(cls_input), labels=np.asarray(labels))
        layer = config.repsd_layer
        terms["repsd"] = F.mse(_mid_pool(trunk.hidden, layer), stop_gradient(_mid_pool(target_hidden, layer)))
        teacher = teacher or FrozenTeacher(model.config)
        terms["align"] = model.align_features(config.align_layer, online.hidden, teacher(images))

    w = config.weights
    weights = {"main": w.dsd, "velo": w.velo, "rec": w.rec, "cls": w.cls, "repsd": w.repsd, "align": w.align}
    total = None
    for name, term in terms.items():
        weighted = F.scalar_mul(term, weights[name])
        total = weighted if total is None else F.add(total, weighted)

    prediction = predictor_output(head, noisy.eps, variant.parameterization)
    return LossBreakdown(total=total, terms=terms, z1=z1, z2=z2, prediction=prediction, images=images,
                         online_input=x_online, t=noisy.t, weights=weights)


def check_wiring(variant: CaseVariant, breakdown: LossBreakdown):
    """
    Structural checks on an assembled loss: which tensors carry tape
    handles, and which terms are present. Raises ExperimentError.
    """
    if not breakdown.z1.tracked:
        raise ExperimentError("online latents z1 carry no tape handle; build the loss under a GradTape",
                              field="variant")
    if variant.target_requires_grad:
        if breakdown.z2 is not breakdown.z1:
            raise ExperimentError("vanilla joint training must regress onto the online latents", field="variant")
    elif breakdown.z2.tracked:
        raise ExperimentError(f"variant '{variant.value}' needs a stop-gradient target", field="variant")

    expected = {"main", "rec"} | ({"velo", "cls", "repsd", "align"} if variant.auxiliary_losses else set())
    if set(breakdown.terms) != expected:
        raise ExperimentError(f"terms {sorted(breakdown.terms)} do not match variant '{variant.value}'",
                              field="variant")
    augmented = breakdown.online_input is not breakdown.images
    if augmented != variant.uses_augmentation:
        raise ExperimentError(f"online view augmentation does not match variant '{variant.value}'", field="variant")
    logger.debug(f"wiring verified for variant '{variant.value}'")
