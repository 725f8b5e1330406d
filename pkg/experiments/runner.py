"""
Full runs of one or more cases: data loading, the step loop, metrics
files, checkpoints and the cross-case comparison.
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff.tensor import constant
from data_repository.datasets import ImageDataset
from data_repository.idx_import import load_idx
from data_repository.synthetic import synth_dataset
from integration.checkpoint import read_checkpoint, write_checkpoint
from integration.metrics_csv import metrics_frame, truncate_metrics_csv, write_metrics_csv
from integration.plots import emit_comparison_svg
from network.alignment import FrozenTeacher

from .config import ExperimentConfig, ExperimentError
from .trainer import BATCH_STREAM, TrainingAborted, init_state, step_rng, train_step

logger = logging.getLogger(__name__)


@dataclass
class RunSummary:
    case: str
    steps: int
    metrics_path: Path
    checkpoint_path: Path
    final: Dict[str, float] = field(default_factory=dict)
    minimum: Dict[str, float] = field(default_factory=dict)
    maximum: Dict[str, float] = field(default_factory=dict)
    heldout_accuracy: Optional[float] = None


def load_dataset(config: ExperimentConfig) -> ImageDataset:
    spec, model = config.dataset, config.model
    if spec.source == "idx":
        return load_idx(spec.images_path, spec.labels_path, image_size=model.image_size,
                        class_count=model.class_count)
    return synth_dataset(model.class_count, spec.samples_per_class, model.image_size, config.data_seed,
                         channels=model.channels)


def classification_accuracy(model, dataset: ImageDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy of the classifier head on online latents"""
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images, labels = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        logits = model.classify(model.encode(constant(images))).data
        correct += int(np.sum(np.argmax(logits, axis=1) == labels))
    return correct / len(dataset)


def run_case(config: ExperimentConfig, out_dir, resume: Optional[str] = None,
             progress: bool = False) -> RunSummary:
    """
    Train one case end to end

    Args:
        config: the case's configuration
        out_dir: directory for ``<case>.csv`` and ``<case>.ckpt``
        resume: checkpoint to continue from (the metrics file is cut back to it)
        progress: show a tqdm bar

    Returns:
        RunSummary with final, min and max metrics.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExperimentError(f"cannot create output directory {out_dir}: {e}", field="out_dir")
    case = config.case_name
    metrics_path = out_dir / f"{case}.csv"
    checkpoint_path = out_dir / f"{case}.ckpt"

    train, heldout = load_dataset(config).split(config.dataset.holdout, seed=config.data_seed)
    state = init_state(config)
    if resume:
        state.load_state_arrays(read_checkpoint(resume, require_ema=config.variant.uses_ema))
        state.last_checkpoint = str(resume)
        truncate_metrics_csv(metrics_path, state.step)
        logger.info(f"resuming {case} from step {state.step} ({resume})")
    else:
        write_metrics_csv(metrics_path)
    teacher = FrozenTeacher(config.model) if config.variant.auxiliary_losses else None

    logger.info(f"run {case}: {config.steps} steps, batch {config.batch_size}, {len(train)} training images")
    records = []
    bar = tqdm(total=config.steps, initial=state.step, desc=case, disable=not progress, leave=False)
    try:
        while state.step < config.steps:
            batch = train.sample_batch(step_rng(config.seed, state.step, BATCH_STREAM), config.batch_size)
            state, record = train_step(state, batch, config, teacher=teacher)
            if record is not None:
                write_metrics_csv(metrics_path, [record], append=True)
                records.append(record)
                bar.set_postfix(erank_z1=f"{record.erank_z1:.2f}", l_rec=f"{record.l_rec:.4f}")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 and state.step < config.steps:
                state.last_checkpoint = str(write_checkpoint(checkpoint_path, state.state_arrays()))
            bar.update(1)
    except TrainingAborted:
        logger.exception(f"run {case} aborted")
        raise
    except OSError as e:
        raise ExperimentError(f"I/O failure during run: {e}", field=str(metrics_path))
    finally:
        bar.close()

    write_checkpoint(checkpoint_path, state.state_arrays())
    frame = metrics_frame(metrics_path)
    summary = RunSummary(case=case, steps=state.step, metrics_path=metrics_path, checkpoint_path=checkpoint_path)
    if not frame.empty:
        summary.final = frame.iloc[-1].to_dict()
        summary.minimum = frame.min().to_dict()
        summary.maximum = frame.max().to_dict()
    if config.variant.auxiliary_losses and len(heldout):
        summary.heldout_accuracy = classification_accuracy(state.model, heldout)
    logger.info(f"run {case} finished: final erank z1 {summary.final.get('erank_z1', float('nan')):.3f}")
    return summary


def roughness(series: pd.Series) -> float:
    """Mean absolute change between consecutive logged values"""
    diffs = series.diff().abs().dropna()
    return float(diffs.mean()) if len(diffs) else 0.0


def summarize_metrics(case: str, frame: pd.DataFrame) -> Dict[str, float]:
    """One comparison-table row"""
    gap = frame["erank_z2"] - frame["erank_pred"]
    return {
        "case": case,
        "logged": len(frame),
        "final_erank_z1": frame["erank_z1"].iloc[-1],
        "min_erank_z1": frame["erank_z1"].min(),
        "max_erank_z1": frame["erank_z1"].max(),
        "final_erank_z2": frame["erank_z2"].iloc[-1],
        "final_erank_pred": frame["erank_pred"].iloc[-1],
        "l_rec_delta": frame["l_rec"].iloc[-1] - frame["l_rec"].iloc[0],
        "l_main_delta": frame["l_main"].iloc[-1] - frame["l_main"].iloc[0],
        "rank_gap_fraction": float((gap > 0).mean()),
        "l_main_roughness": roughness(frame["l_main"]),
    }


def compare_frames(frames: Dict[str, pd.DataFrame], out_dir=None) -> pd.DataFrame:
    """Comparison table (one row per case) and, with ``out_dir``, the multi-panel SVG"""
    if len(frames) < 2:
        raise ExperimentError("comparison needs at least two runs", field="cases")
    empty = [case for case, frame in frames.items() if frame.empty]
    if empty:
        raise ExperimentError(f"runs without logged metrics: {empty}", field="cases")
    lengths = {case: frame.index[-1] for case, frame in frames.items()}
    if len(set(lengths.values())) != 1:
        raise ExperimentError(f"runs have different budgets: {lengths}", field="steps")

    table = pd.DataFrame([summarize_metrics(case, frame) for case, frame in frames.items()]).set_index("case")
    if out_dir is not None:
        emit_comparison_svg(frames, Path(out_dir) / "comparison.svg")
        table.to_csv(Path(out_dir) / "comparison.csv", float_format="%.17g")
    return table


def compare_cases(configs: Sequence[ExperimentConfig], out_dir, workers: int = 1,
                  progress: bool = False) -> pd.DataFrame:
    """
    Run every case under one shared budget and tabulate them side by side

    Runs are independent (separate models and files) and may execute in
    separate worker processes when ``workers`` > 1.
    """
    if len(configs) < 2:
        raise ExperimentError("comparison needs at least two cases", field="cases")
    budgets = {c.case_name: c.budget() for c in configs}
    if len(set(budgets.values())) != 1:
        raise ExperimentError(f"cases do not share a budget: {sorted(budgets)}", field="steps")
    if len(budgets) != len(configs):
        raise ExperimentError("each case may appear once", field="cases")

    started = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            summaries: List[RunSummary] = list(pool.map(partial(run_case, out_dir=out_dir), configs))
    else:
        summaries = [run_case(c, out_dir, progress=progress) for c in configs]

    frames = {s.case: metrics_frame(s.metrics_path) for s in summaries}
    table = compare_frames(frames, out_dir)
    accuracy = {s.case: s.heldout_accuracy for s in summaries if s.heldout_accuracy is not None}
    if accuracy:
        table["heldout_accuracy"] = pd.Series(accuracy)
    logger.info(f"compared {len(table)} cases in {out_dir} ({time.perf_counter() - started:.1f} s)")
    return table
