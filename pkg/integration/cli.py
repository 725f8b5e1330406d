"""
Shared pieces of the management commands: the common run flags and the
translation of domain errors into exit codes.
"""
from django.core.management.base import CommandError

from augmentation.pipeline import AugmentationError
from autodiff.tensor import AutodiffError
from data_repository.datasets import DatasetError
from data_repository.idx_import import IDXImportError
from diagnostics.spectrum import SpectrumError
from experiments.config import ExperimentError
from experiments.trainer import TrainingAborted
from network.config import NetworkError
from objectives.flow import ObjectiveError

from .checkpoint import CheckpointError
from .metrics_csv import MetricsFormatError
from .plots import PlotError
from .run_config import RunConfigError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_VERIFICATION = 5

EXIT_CODES = (
    ((RunConfigError, ExperimentError, AugmentationError), EXIT_CONFIG),
    ((IDXImportError, DatasetError, MetricsFormatError, CheckpointError, PlotError, OSError), EXIT_DATA),
    ((TrainingAborted, NetworkError, ObjectiveError, SpectrumError, AutodiffError, FloatingPointError), EXIT_NUMERIC),
)

DOMAIN_ERRORS = tuple(t for types, _ in EXIT_CODES for t in types)


def exit_code(error: Exception) -> int:
    for types, code in EXIT_CODES:
        if isinstance(error, types):
            return code
    return 1


def command_error(error: Exception) -> CommandError:
    return CommandError(str(error), returncode=exit_code(error))


def add_run_arguments(parser, case: bool = True, steps: bool = True):
    parser.add_argument("--config", type=str, default=None, help="Run configuration file (INI)")
    parser.add_argument("--out", type=str, default=None, help="Output directory (default io.out_dir or DSD_OUT_DIR)")
    parser.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    if case:
        parser.add_argument("--case", type=str, default=None,
                            help="vanilla | decoupled | transformed | ema | augmented | full")
    if steps:
        parser.add_argument("--steps", type=int, default=None, help="Override the step budget")
