"""
One optimization step of a collapse-laboratory run.
"""
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from autodiff.optim import AdamW, clip_grad_norm
from autodiff.tensor import GradTape, backward
from diagnostics.spectrum import SpectrumError, batch_latent_matrix, effective_rank
from network.alignment import FrozenTeacher
from network.backbone import UnifiedBackbone
from network.ema import TargetEncoder, ema_momentum, ema_update

from .config import ExperimentConfig, MetricsRecord
from .wiring import LossBreakdown, assemble_loss, check_wiring

logger = logging.getLogger(__name__)

BATCH_STREAM = 1
NOISE_STREAM = 2
ADAM_BETAS = (0.9, 0.95)


class TrainingAborted(Exception):
    """Raised when a step produces a non-finite loss or gradient"""

    def __init__(self, message, step=None, checkpoint=None):
        self.message = message
        self.step = step
        self.checkpoint = checkpoint

        detail = ""
        if step is not None:
            detail += f" at step {step}"
        if checkpoint is not None:
            detail += f"; last good checkpoint: {checkpoint}"

        super().__init__(f"{message}{detail}")


@dataclass
class TrainState:
    model: UnifiedBackbone
    optimizer: AdamW
    target: Optional[TargetEncoder]
    step: int = 0
    last_checkpoint: Optional[str] = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Everything a checkpoint stores, under model/, ema/ and optim/ prefixes"""
        arrays = OrderedDict()
        for name, value in self.model.state_arrays().items():
            arrays[f"model/{name}"] = value
        if self.target is not None:
            for name, value in self.target.state_arrays().items():
                arrays[f"ema/{name}"] = value
        for name, value in self.optimizer.state_arrays().items():
            arrays[f"optim/{name}"] = value
        arrays["meta/step"] = np.array([float(self.step)])
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        def section(prefix):
            return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}

        self.model.load_state_arrays(section("model/"))
        if self.target is not None:
            self.target.load_state_arrays(section("ema/"))
        self.optimizer.load_state_arrays(section("optim/"))
        self.step = int(arrays["meta/step"][0])


def init_state(config: ExperimentConfig) -> TrainState:
    model = UnifiedBackbone(config.model, seed=config.seed)
    optimizer = AdamW(model.params, lr=config.learning_rate, betas=ADAM_BETAS, weight_decay=config.weight_decay)
    target = TargetEncoder.from_model(model, decay=config.ema_decay) if config.variant.uses_ema else None
    return TrainState(model=model, optimizer=optimizer, target=target)


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    """Per-step stream, so a resumed run draws exactly what an uninterrupted one would"""
    return np.random.default_rng(np.random.SeedSequence(entropy=[seed, stream], spawn_key=(step,)))


def latent_erank(latents) -> float:
    """Effective rank of batch×tokens×dim latents; an all-zero batch counts as fully collapsed."""
    try:
        return effective_rank(batch_latent_matrix(latents))
    except SpectrumError as e:
        logger.warning(f"effective rank undefined ({e}); recording 1.0")
        return 1.0


def should_log(step: int, config: ExperimentConfig) -> bool:
    """Steps are 1-based; the first, every ``metrics_every``-th and the last are logged."""
    return step == 1 or step % config.metrics_every == 0 or step == config.steps


def metrics_record(step: int, breakdown: LossBreakdown, grad_norm: float, wall_ms: float) -> MetricsRecord:
    values = breakdown.term_values()
    return MetricsRecord(
        step=step,
        erank_z1=latent_erank(breakdown.z1),
        erank_z2=latent_erank(breakdown.z2),
        erank_pred=latent_erank(breakdown.prediction),
        l_rec=values["rec"],
        l_main=values["main"],
        l_velo=values["velo"],
        l_cls=values["cls"],
        grad_norm=grad_norm,
        wall_ms=wall_ms,
    )


def train_step(state: TrainState, batch: Tuple[np.ndarray, np.ndarray], config: ExperimentConfig,
               teacher: Optional[FrozenTeacher] = None) -> Tuple[TrainState, Optional[MetricsRecord]]:
    """
    Forward, backward, clip, AdamW update and (for EMA variants) the
    target update

    Args:
        state: mutable run state, advanced in place
        batch: (images, labels)
        config: the run's configuration
        teacher: alignment teacher for the full variant

    Returns:
        (state, MetricsRecord) on logged steps, (state, None) otherwise.
    """
    images, labels = batch
    started = time.perf_counter()
    rng = step_rng(config.seed, state.step, NOISE_STREAM)

    with GradTape() as tape:
        tape.watch(state.model.params)
        breakdown = assemble_loss(config, images, labels, state.model, state.target, rng,
                                  step=state.step, teacher=teacher)
    if state.step == 0:
        check_wiring(config.variant, breakdown)

    loss_value = breakdown.total.item()
    if not np.isfinite(loss_value):
        raise TrainingAborted(f"non-finite loss {loss_value} ({breakdown.term_values()})",
                              step=state.step + 1, checkpoint=state.last_checkpoint)

    grads = backward(breakdown.total, tape)
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingAborted(f"non-finite gradient for {bad[:3]}", step=state.step + 1,
                              checkpoint=state.last_checkpoint)

    grads, raw_norm, clipped_norm = clip_grad_norm(grads, config.grad_clip)
    state.optimizer.step(grads)
    if state.target is not None:
        m = ema_momentum(state.step, config.steps, config.ema_schedule, config.ema_decay, config.ema_end)
        ema_update(state.model.params, state.target, m)
    state.step += 1

    if not should_log(state.step, config):
        return state, None
    wall_ms = (time.perf_counter() - started) * 1000.0 if config.wall_clock else 0.0
    record = metrics_record(state.step, breakdown, clipped_norm, wall_ms)
    logger.debug(f"step {state.step}: loss {loss_value:.6g}, grad norm {raw_norm:.4g} -> {clipped_norm:.4g}, "
                 f"erank z1 {record.erank_z1:.3f}")
    return state, record
