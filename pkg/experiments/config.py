"""
Experiment configuration: the training variants, loss weights, budgets
and the per-step metrics record.
"""
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Dict, Optional, Tuple

from augmentation.pipeline import AugmentConfig
from network.config import ModelConfig


class ExperimentError(Exception):
    """Raised for invalid experiment settings and mismatched budgets"""

    def __init__(self, message, field=None):
        self.message = message
        self.field = field

        detail = ""
        if field is not None:
            detail += f" (field '{field}')"

        super().__init__(f"{message}{detail}")


class CaseVariant(Enum):
    """
    The training variants of the collapse laboratory.

    Each variant adds one fix on top of the previous one, ending in the
    full configuration with every auxiliary objective.
    """

    VANILLA_JOINT = "vanilla"
    DECOUPLED = "decoupled"
    TRANSFORMED = "transformed"
    EMA_TARGET = "ema"
    AUGMENTED = "augmented"
    FULL_DSD = "full"

    @classmethod
    def from_name(cls, name: str) -> "CaseVariant":
        key = str(name).strip().lower().replace("_", "").replace("-", "")
        for variant in cls:
            if key in (variant.value, variant.name.lower().replace("_", "")):
                return variant
        aliases = {"vanillajoint": cls.VANILLA_JOINT, "ematarget": cls.EMA_TARGET, "fulldsd": cls.FULL_DSD,
                   "dsd": cls.FULL_DSD}
        if key in aliases:
            return aliases[key]
        raise ExperimentError(f"unknown case '{name}', expected one of {[v.value for v in cls]}", field="variant")

    @property
    def parameterization(self) -> str:
        """What the main diffusion head predicts"""
        return "velocity" if self in (CaseVariant.VANILLA_JOINT, CaseVariant.DECOUPLED) else "clean"

    @property
    def uses_ema(self) -> bool:
        return self in (CaseVariant.EMA_TARGET, CaseVariant.AUGMENTED, CaseVariant.FULL_DSD)

    @property
    def uses_augmentation(self) -> bool:
        return self in (CaseVariant.AUGMENTED, CaseVariant.FULL_DSD)

    @property
    def target_requires_grad(self) -> bool:
        return self is CaseVariant.VANILLA_JOINT

    @property
    def auxiliary_losses(self) -> bool:
        """Detached velocity, classification, representation SD and alignment"""
        return self is CaseVariant.FULL_DSD


@dataclass(frozen=True)
class LossWeights:
    dsd: float = 1.0
    velo: float = 1.0
    rec: float = 1.0
    cls: float = 0.1
    repsd: float = 0.5
    align: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ExperimentError(f"loss weight must be a finite non-negative number, got {value}",
                                      field=f"weights.{f.name}")


@dataclass(frozen=True)
class DatasetSpec:
    """Where training images come from: procedural shapes or an IDX pair"""

    source: str = "synthetic"
    samples_per_class: int = 100
    images_path: str = ""
    labels_path: str = ""
    holdout: float = 0.1
    seed: Optional[int] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ExperimentError(f"unknown dataset source '{self.source}'", field="data.source")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ExperimentError("IDX datasets need images_path and labels_path", field="data.images_path")
        if not 0.0 <= self.holdout < 1.0:
            raise ExperimentError(f"holdout {self.holdout} outside [0, 1)", field="data.holdout")
        if self.samples_per_class < 1:
            raise ExperimentError("samples_per_class must be positive", field="data.samples_per_class")


@dataclass(frozen=True)
class ExperimentConfig:
    variant: CaseVariant = CaseVariant.FULL_DSD
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 3.0
    ema_decay: float = 0.99
    ema_schedule: str = "constant"
    ema_end: float = 0.999
    label_dropout: float = 0.1
    align_layer: int = 0
    classify_from: str = "online"
    seed: int = 0
    metrics_every: int = 10
    checkpoint_every: int = 0
    wall_clock: bool = True

    def __post_init__(self):
        if not isinstance(self.variant, CaseVariant):
            object.__setattr__(self, "variant", CaseVariant.from_name(self.variant))
        if self.steps < 1:
            raise ExperimentError(f"steps must be at least 1, got {self.steps}", field="steps")
        if self.batch_size < 1:
            raise ExperimentError("batch size must be positive", field="batch_size")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ExperimentError("learning rate and clip norm must be positive, weight decay non-negative",
                                  field="learning_rate")
        if not 0.0 <= self.ema_decay < 1.0 or not 0.0 <= self.ema_end < 1.0:
            raise ExperimentError("EMA decay must lie in [0, 1)", field="ema_decay")
        if self.ema_schedule not in ("constant", "cosine"):
            raise ExperimentError(f"unknown EMA schedule '{self.ema_schedule}'", field="ema_schedule")
        if not 0.0 <= self.label_dropout <= 1.0:
            raise ExperimentError("label dropout outside [0, 1]", field="label_dropout")
        if not 0 <= self.align_layer < self.model.trunk_layers:
            raise ExperimentError(f"alignment layer {self.align_layer} outside the trunk", field="align_layer")
        if self.classify_from not in ("online", "target"):
            raise ExperimentError("classify_from must be 'online' or 'target'", field="classify_from")
        if self.metrics_every < 1 or self.checkpoint_every < 0:
            raise ExperimentError("metrics_every must be positive and checkpoint_every non-negative",
                                  field="metrics_every")

    @property
    def case_name(self) -> str:
        return self.variant.value

    @property
    def repsd_layer(self) -> int:
        """Middle trunk layer used by representation-level self-distillation"""
        return self.model.trunk_layers // 2

    @property
    def data_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        return replace(self, **overrides)

    def budget(self) -> Tuple:
        """Everything two runs must share to be compared"""
        return (self.steps, self.batch_size, self.learning_rate, self.model, self.dataset,
                self.data_seed, self.metrics_every)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["variant"] = self.variant.value
        return values


METRICS_COLUMNS = (
    "step", "erank_z1", "erank_z2", "erank_pred", "l_rec", "l_main", "l_velo", "l_cls", "grad_norm", "wall_ms",
)


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    erank_z1: float
    erank_z2: float
    erank_pred: float
    l_rec: float
    l_main: float
    l_velo: float
    l_cls: float
    grad_norm: float
    wall_ms: float

    def as_row(self) -> Tuple:
        return tuple(getattr(self, name) for name in METRICS_COLUMNS)

    @classmethod
    def from_row(cls, row) -> "MetricsRecord":
        values = dict(zip(METRICS_COLUMNS, row)) if not isinstance(row, dict) else row
        return cls(step=int(values["step"]), **{k: float(values[k]) for k in METRICS_COLUMNS[1:]})

    @property
    def rank_gap(self) -> float:
        return self.erank_z2 - self.erank_pred
