"""
Collapse calibration: the desk-scale five-case run, its observed metrics
and the thresholds derived from them.

The committed fixture holds the run settings, the acceptance bounds and,
once ``manage.py calibrate`` has been run on the reference machine, the
observed values. Thresholds derived from observations are never looser
than the acceptance bounds.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from integration.metrics_csv import metrics_frame
from network.config import ModelConfig

from .config import CaseVariant, DatasetSpec, ExperimentConfig, ExperimentError
from .runner import compare_cases

logger = logging.getLogger(__name__)

COLLAPSE_FIXTURE = Path(__file__).resolve().parent / "fixtures" / "collapse_calibration.json"

COLLAPSE_CASES = (
    CaseVariant.VANILLA_JOINT, CaseVariant.DECOUPLED, CaseVariant.TRANSFORMED,
    CaseVariant.EMA_TARGET, CaseVariant.AUGMENTED,
)

ACCEPTANCE_BOUNDS = {
    "vanilla_erank_max": 2.0,
    "transformed_erank_min": 4.0,
    "erank_ratio_min": 2.0,
    "l_rec_reduction_min": 0.3,
    "rank_gap_fraction_min": 0.9,
    "ema_roughness_ratio_max": 1.0,
}

# Observed values are scaled by these margins before clamping to the bounds
MARGINS = {
    "vanilla_erank_max": 1.25,
    "transformed_erank_min": 0.8,
    "erank_ratio_min": 0.8,
    "l_rec_reduction_min": 0.8,
    "rank_gap_fraction_min": 0.95,
    "ema_roughness_ratio_max": 1.25,
}


@dataclass(frozen=True)
class CollapseCalibration:
    model: ModelConfig
    steps: int = 2000
    batch_size: int = 64
    metrics_every: int = 10
    seed: int = 0
    samples_per_class: int = 100
    early_step: int = 50
    budget_seconds: float = 1200.0
    thresholds: Dict[str, float] = field(default_factory=lambda: dict(ACCEPTANCE_BOUNDS))
    observed: Optional[Dict[str, float]] = None

    def configs(self) -> List[ExperimentConfig]:
        base = ExperimentConfig(
            model=self.model, dataset=DatasetSpec(samples_per_class=self.samples_per_class), steps=self.steps,
            batch_size=self.batch_size, metrics_every=self.metrics_every, seed=self.seed, wall_clock=False,
        )
        return [base.with_overrides(variant=v) for v in COLLAPSE_CASES]

    def to_dict(self) -> Dict:
        return {
            "model": asdict(self.model),
            "steps": self.steps,
            "batch_size": self.batch_size,
            "metrics_every": self.metrics_every,
            "seed": self.seed,
            "samples_per_class": self.samples_per_class,
            "early_step": self.early_step,
            "budget_seconds": self.budget_seconds,
            "thresholds": self.thresholds,
            "observed": self.observed,
        }


def load_calibration(path=COLLAPSE_FIXTURE) -> CollapseCalibration:
    try:
        values = json.loads(Path(path).read_text())
    except OSError as e:
        raise ExperimentError(f"cannot read calibration {path}: {e}", field="calibration")
    except json.JSONDecodeError as e:
        raise ExperimentError(f"calibration {path} is not JSON: {e}", field="calibration")
    try:
        model = ModelConfig(**values.pop("model"))
        thresholds = {**ACCEPTANCE_BOUNDS, **values.pop("thresholds", {})}
        return CollapseCalibration(model=model, thresholds=thresholds, **values)
    except (KeyError, TypeError) as e:
        raise ExperimentError(f"calibration {path} is malformed: {e}", field="calibration")


def observe(table: pd.DataFrame, frames: Dict[str, pd.DataFrame], early_step: int) -> Dict[str, float]:
    """The handful of numbers the collapse assertions are made against"""
    transformed = frames["transformed"]
    early = transformed.loc[transformed.index <= early_step, "l_rec"].mean()
    final_rank = table["final_erank_z1"]
    return {
        "vanilla_erank": float(final_rank["vanilla"]),
        "decoupled_erank": float(final_rank["decoupled"]),
        "transformed_erank": float(final_rank["transformed"]),
        "ema_erank": float(final_rank["ema"]),
        "augmented_erank": float(final_rank["augmented"]),
        "l_rec_reduction": float(1.0 - transformed["l_rec"].iloc[-1] / early),
        "rank_gap_fraction": float(table.loc["augmented", "rank_gap_fraction"]),
        "ema_roughness_ratio": float(
            table.loc["ema", "l_main_roughness"] / table.loc["transformed", "l_main_roughness"]
        ),
    }


def derive_thresholds(observed: Dict[str, float]) -> Dict[str, float]:
    """Thresholds a margin away from the observations, clamped to the acceptance bounds"""
    ratio = observed["transformed_erank"] / observed["vanilla_erank"]
    scaled = {
        "vanilla_erank_max": observed["vanilla_erank"] * MARGINS["vanilla_erank_max"],
        "transformed_erank_min": observed["transformed_erank"] * MARGINS["transformed_erank_min"],
        "erank_ratio_min": ratio * MARGINS["erank_ratio_min"],
        "l_rec_reduction_min": observed["l_rec_reduction"] * MARGINS["l_rec_reduction_min"],
        "rank_gap_fraction_min": observed["rank_gap_fraction"] * MARGINS["rank_gap_fraction_min"],
        "ema_roughness_ratio_max": observed["ema_roughness_ratio"] * MARGINS["ema_roughness_ratio_max"],
    }
    thresholds = {}
    for name, bound in ACCEPTANCE_BOUNDS.items():
        thresholds[name] = min(bound, scaled[name]) if name.endswith("_max") else max(bound, scaled[name])
    return thresholds


def run_calibration(calibration: CollapseCalibration, out_dir, workers: int = 5):
    """
    Run the five collapse cases

    Returns:
        (table, frames, observed, elapsed seconds)
    """
    configs = calibration.configs()
    started = time.perf_counter()
    table = compare_cases(configs, out_dir, workers=workers)
    elapsed = time.perf_counter() - started
    frames = {c.case_name: metrics_frame(Path(out_dir) / f"{c.case_name}.csv") for c in configs}
    observed = observe(table, frames, calibration.early_step)
    logger.info(f"collapse calibration finished in {elapsed:.1f} s: {observed}")
    return table, frames, observed, elapsed


def write_calibration(calibration: CollapseCalibration, observed: Dict[str, float], path=COLLAPSE_FIXTURE) -> Path:
    updated = replace(calibration, thresholds=derive_thresholds(observed), observed=observed)
    path = Path(path)
    try:
        path.write_text(json.dumps(updated.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise ExperimentError(f"cannot write calibration {path}: {e}", field="calibration")
    return path
