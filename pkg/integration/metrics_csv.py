"""
Metrics CSV files: one header line, then one row per logged step.

Floats are written with 17 significant digits so every value reads back
bit-exactly.
"""
import csv
import logging
import math
from pathlib import Path
from typing import Iterable, List

import pandas as pd

from experiments.config import METRICS_COLUMNS, MetricsRecord

logger = logging.getLogger(__name__)


class MetricsFormatError(Exception):
    """Exception raised for malformed metrics files"""

    def __init__(self, message, path=None, line_num=None):
        self.message = message
        self.path = path
        self.line_num = line_num

        detail = ""
        if path is not None:
            detail += f" in '{path}'"
        if line_num is not None:
            detail += f" at line {line_num}"

        super().__init__(f"{message}{detail}")


def format_value(value) -> str:
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    return f"{float(value):.17g}"


def _format_row(record: MetricsRecord) -> List[str]:
    return [format_value(v) for v in record.as_row()]


def write_metrics_csv(path, records: Iterable[MetricsRecord] = (), append: bool = False) -> Path:
    """
    Write (or append to) a metrics file

    A fresh file always starts with the header, so an empty run yields a
    header-only file.
    """
    path = Path(path)
    fresh = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "w" if fresh else "a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        for record in records:
            writer.writerow(_format_row(record))
    return path


def read_metrics_csv(path) -> List[MetricsRecord]:
    """Read and validate a metrics file; any malformed line is rejected with its number."""
    path = Path(path)
    try:
        f = open(path, newline="")
    except OSError as e:
        raise MetricsFormatError(f"Cannot open metrics file: {e}", path=str(path))

    records = []
    with f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_COLUMNS:
            raise MetricsFormatError(f"Header must be {','.join(METRICS_COLUMNS)}", path=str(path), line_num=1)
        for row in reader:
            line_num = reader.line_num
            if len(row) != len(METRICS_COLUMNS):
                raise MetricsFormatError(f"Expected {len(METRICS_COLUMNS)} fields, found {len(row)}",
                                         path=str(path), line_num=line_num)
            try:
                step = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as e:
                raise MetricsFormatError(f"Non-numeric field: {e}", path=str(path), line_num=line_num)
            if not all(math.isfinite(v) for v in values):
                raise MetricsFormatError("Non-finite metric value", path=str(path), line_num=line_num)
            records.append(MetricsRecord.from_row([step] + values))
    return records


def truncate_metrics_csv(path, last_step: int) -> int:
    """Drop rows logged after ``last_step`` (used when resuming); returns the rows kept."""
    kept = [r for r in read_metrics_csv(path) if r.step <= last_step]
    write_metrics_csv(path, kept)
    logger.info(f"kept {len(kept)} metric rows up to step {last_step} in {path}")
    return len(kept)


def metrics_frame(path) -> pd.DataFrame:
    """Validated metrics as a DataFrame indexed by step"""
    records = read_metrics_csv(path)
    frame = pd.DataFrame([r.as_row() for r in records], columns=list(METRICS_COLUMNS))
    return frame.set_index("step")
