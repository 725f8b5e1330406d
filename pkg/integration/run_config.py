"""
Run configuration files.

A run configuration is sectioned INI text. Every key has a default in
``DEFAULTS``; a file only needs the keys it changes. Unknown sections or
keys are rejected, and values are coerced to the type of their default.

Example::

    [train]
    case = transformed
    steps = 2000

    [augment]
    mask_ratio = 0.75
"""
import configparser
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from django.conf import settings

from augmentation.pipeline import AugmentationError, AugmentConfig
from experiments.config import CaseVariant, DatasetSpec, ExperimentConfig, ExperimentError, LossWeights
from network.config import ModelConfig, NetworkError

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {
        "image_size": 32,
        "channels": 1,
        "patch_size": 4,
        "trunk_layers": 2,
        "hidden_dim": 64,
        "attention_heads": 4,
        "latent_dim": 8,
        "register_count": 4,
        "class_count": 10,
        "time_embed_dim": 32,
        "mlp_ratio": 2,
        "teacher_dim": 16,
        "init_std": 0.02,
    },
    "train": {
        "case": "full",
        "steps": 2000,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "grad_clip": 3.0,
        "ema_decay": 0.99,
        "ema_schedule": "constant",
        "ema_end": 0.999,
        "label_dropout": 0.1,
        "align_layer": 0,
        "classify_from": "online",
        "seed": 0,
        "metrics_every": 10,
        "lambda_dsd": 1.0,
        "lambda_velo": 1.0,
        "lambda_rec": 1.0,
        "lambda_cls": 0.1,
        "lambda_repsd": 0.5,
        "lambda_align": 0.5,
    },
    "augment": {
        "mask_ratio": 0.75,
        "mask_fill": 0.0,
        "mask_prob": 1.0,
        "blur_prob": 0.5,
        "blur_sigma_min": 0.1,
        "blur_sigma_max": 1.5,
        "jitter_prob": 0.8,
        "brightness_min": -0.2,
        "brightness_max": 0.2,
        "contrast_min": 0.8,
        "contrast_max": 1.2,
        "solarize_prob": 0.2,
        "solarize_threshold": 0.5,
    },
    "sample": {
        "steps": 64,
        "guidance_scale": 1.0,
        "label": -1,
        "batch": 16,
        "seed": 0,
        "source": "velocity",
    },
    "data": {
        "source": "synthetic",
        "samples_per_class": 100,
        "images_path": "",
        "labels_path": "",
        "holdout": 0.1,
    },
    "io": {
        "out_dir": "",
        "wall_clock": True,
        "checkpoint_every": 0,
    },
}


class RunConfigError(Exception):
    """Exception raised for invalid run configuration files"""

    def __init__(self, message, section=None, key=None):
        self.message = message
        self.section = section
        self.key = key

        detail = ""
        if section is not None:
            detail += f" in section [{section}]"
        if key is not None:
            detail += f" key '{key}'"

        super().__init__(f"{message}{detail}")


_BOOLEANS = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


def _coerce(raw: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.strip().lower() not in _BOOLEANS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOLEANS[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise RunConfigError(f"Invalid value {raw!r} ({e})", section=section, key=key)


def load_run_config(path: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
    """
    Defaults overlaid with the values in ``path`` (if given)

    Returns:
        Mapping section -> key -> typed value, covering every default key.
    """
    values = {section: dict(keys) for section, keys in DEFAULTS.items()}
    if path is None:
        return values

    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as e:
        raise RunConfigError(f"Cannot read run configuration {path}: {e}")
    except configparser.Error as e:
        raise RunConfigError(f"Malformed run configuration {path}: {e}")

    for section in parser.sections():
        if section not in DEFAULTS:
            raise RunConfigError("Unknown section", section=section)
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise RunConfigError("Unknown key", section=section, key=key)
            values[section][key] = _coerce(raw, DEFAULTS[section][key], section, key)

    logger.debug(f"loaded run configuration from {path}")
    return values


def experiment_config(values: Dict[str, Dict[str, Any]], case: Optional[str] = None,
                      seed: Optional[int] = None, steps: Optional[int] = None) -> ExperimentConfig:
    """Build an ExperimentConfig; ``case``/``seed``/``steps`` are command-line overrides."""
    train, aug, data, io = values["train"], values["augment"], values["data"], values["io"]
    try:
        model = ModelConfig(**values["model"])
        augment = AugmentConfig(
            mask_ratio=aug["mask_ratio"],
            mask_fill=aug["mask_fill"],
            mask_prob=aug["mask_prob"],
            blur_prob=aug["blur_prob"],
            blur_sigma=(aug["blur_sigma_min"], aug["blur_sigma_max"]),
            jitter_prob=aug["jitter_prob"],
            brightness=(aug["brightness_min"], aug["brightness_max"]),
            contrast=(aug["contrast_min"], aug["contrast_max"]),
            solarize_prob=aug["solarize_prob"],
            solarize_threshold=aug["solarize_threshold"],
            patch_size=model.patch_size,
        )
        weights = LossWeights(
            dsd=train["lambda_dsd"], velo=train["lambda_velo"], rec=train["lambda_rec"],
            cls=train["lambda_cls"], repsd=train["lambda_repsd"], align=train["lambda_align"],
        )
        dataset = DatasetSpec(
            source=data["source"], samples_per_class=data["samples_per_class"],
            images_path=data["images_path"], labels_path=data["labels_path"], holdout=data["holdout"],
        )
        return ExperimentConfig(
            variant=CaseVariant.from_name(case or train["case"]),
            model=model,
            augment=augment,
            dataset=dataset,
            weights=weights,
            steps=train["steps"] if steps is None else steps,
            batch_size=train["batch_size"],
            learning_rate=train["learning_rate"],
            weight_decay=train["weight_decay"],
            grad_clip=train["grad_clip"],
            ema_decay=train["ema_decay"],
            ema_schedule=train["ema_schedule"],
            ema_end=train["ema_end"],
            label_dropout=train["label_dropout"],
            align_layer=train["align_layer"],
            classify_from=train["classify_from"],
            seed=train["seed"] if seed is None else seed,
            metrics_every=train["metrics_every"],
            checkpoint_every=io["checkpoint_every"],
            wall_clock=io["wall_clock"],
        )
    except (ExperimentError, AugmentationError, NetworkError, ValueError) as e:
        field = getattr(e, "field", None) or getattr(e, "operation", None)
        raise RunConfigError(f"Invalid configuration: {e}", key=field) from e


def output_dir(values: Dict[str, Dict[str, Any]], override: Optional[str] = None) -> Path:
    """--out, then io.out_dir, then settings.DSD_OUT_DIR"""
    if override:
        return Path(override)
    if values["io"]["out_dir"]:
        return Path(values["io"]["out_dir"])
    return Path(settings.DSD_OUT_DIR)
