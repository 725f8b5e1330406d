"""
SVG trajectory plots of metrics files.

Output is deterministic: fixed hash salt, no date metadata and text kept
as text, so identical input yields byte-identical files.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .metrics_csv import MetricsFormatError, metrics_frame  # noqa: E402

logger = logging.getLogger(__name__)

Y_PADDING = 0.05
SVG_RC = {"svg.hashsalt": "dsd-lab", "svg.fonttype": "none", "path.simplify": False}
ERANK_COLUMNS = ("erank_z1", "erank_z2", "erank_pred")
SERIES_COLORS = {
    "erank_z1": "tab:blue",
    "erank_z2": "tab:green",
    "erank_pred": "tab:purple",
    "l_rec": "tab:orange",
    "l_main": "tab:red",
    "l_velo": "tab:brown",
    "l_cls": "tab:olive",
}


class PlotError(Exception):
    """Exception raised when a plot cannot be produced from a metrics file"""

    def __init__(self, message, path=None, column=None):
        self.message = message
        self.path = path
        self.column = column

        detail = ""
        if column is not None:
            detail += f" (column '{column}')"
        if path is not None:
            detail += f" in '{path}'"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class PlotInfo:
    path: Path
    series: Tuple[str, ...]
    legend: Tuple[str, ...]
    ylim: Tuple[float, float]


def padded_range(values, padding: float = Y_PADDING) -> Tuple[float, float]:
    """Data min/max widened by ``padding`` of the span on each side"""
    low, high = float(min(values)), float(max(values))
    span = high - low
    if span == 0.0:
        span = abs(high) or 1.0
    return low - padding * span, high + padding * span


def _load(csv_path) -> pd.DataFrame:
    try:
        frame = metrics_frame(csv_path)
    except MetricsFormatError as e:
        raise PlotError(str(e), path=str(csv_path))
    if frame.empty:
        raise PlotError("Metrics file has no rows to plot", path=str(csv_path))
    return frame


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return out_path


def emit_plot_svg(csv_path, columns: Sequence[str], out_path) -> PlotInfo:
    """
    One SVG with a line per requested column against step

    Args:
        csv_path: metrics CSV
        columns: metric columns to draw
        out_path: SVG destination

    Returns:
        PlotInfo describing the drawn series, legend entries and y-limits.
    """
    frame = _load(csv_path)
    if not columns:
        raise PlotError("No columns requested", path=str(csv_path))
    for column in columns:
        if column not in frame.columns:
            raise PlotError("Requested column does not exist", path=str(csv_path), column=column)

    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(7, 4))
        for column in columns:
            (line,) = ax.plot(frame.index.to_numpy(), frame[column].to_numpy(), label=column, linewidth=1.2,
                              color=SERIES_COLORS.get(column))
            line.set_gid(f"series-{column}")
        ylim = padded_range(frame[list(columns)].to_numpy().ravel())
        ax.set_ylim(*ylim)
        ax.set_xlabel("step")
        ax.set_title(Path(csv_path).stem)
        legend = ax.legend(loc="best")
        labels = tuple(text.get_text() for text in legend.get_texts())
        fig.tight_layout()
        path = _save(fig, out_path)

    logger.info(f"plot written: {path}")
    return PlotInfo(path=path, series=tuple(columns), legend=labels, ylim=ylim)


def emit_comparison_svg(frames: Dict[str, pd.DataFrame], out_path) -> Path:
    """
    One panel per case: effective ranks on the left axis, reconstruction
    loss on the right
    """
    if not frames:
        raise PlotError("Nothing to compare")
    with plt.rc_context(SVG_RC):
        fig, axes = plt.subplots(1, len(frames), figsize=(4 * len(frames), 3.5), squeeze=False)
        for ax, (case, frame) in zip(axes[0], frames.items()):
            steps = frame.index.to_numpy()
            for column in ERANK_COLUMNS:
                (line,) = ax.plot(steps, frame[column].to_numpy(), label=column, linewidth=1.0,
                                  color=SERIES_COLORS[column])
                line.set_gid(f"{case}-{column}")
            ax.set_title(case)
            ax.set_xlabel("step")
            rec = ax.twinx()
            (line,) = rec.plot(steps, frame["l_rec"].to_numpy(), color=SERIES_COLORS["l_rec"],
                               linestyle="--", label="l_rec")
            line.set_gid(f"{case}-l_rec")
            handles: List = list(ax.get_lines()) + list(rec.get_lines())
            ax.legend(handles, [h.get_label() for h in handles], loc="upper right", fontsize="small")
        axes[0][0].set_ylabel("effective rank")
        fig.tight_layout()
        return _save(fig, out_path)
