from django.conf import settings
from django.core.management.base import BaseCommand

from experiments.runner import run_case
from integration.cli import DOMAIN_ERRORS, add_run_arguments, command_error
from integration.run_config import experiment_config, load_run_config, output_dir


class Command(BaseCommand):
    help = "Trains one case of the collapse laboratory, writing <case>.csv and <case>.ckpt"

    def add_arguments(self, parser):
        add_run_arguments(parser)
        parser.add_argument("--resume", type=str, default=None, help="Checkpoint to continue from")
        parser.add_argument("--no-progress", action="store_true", help="Hide the progress bar")

    def handle(self, *args, **options):
        try:
            values = load_run_config(options["config"])
            config = experiment_config(values, case=options["case"], seed=options["seed"], steps=options["steps"])
            out = output_dir(values, options["out"])
            summary = run_case(config, out, resume=options["resume"],
                               progress=settings.DSD_PROGRESS and not options["no_progress"])
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        self.stdout.write(f"metrics: {summary.metrics_path}")
        self.stdout.write(f"checkpoint: {summary.checkpoint_path}")
        for column in ("erank_z1", "erank_z2", "erank_pred", "l_rec", "l_main"):
            if column in summary.final:
                self.stdout.write(
                    f"{column}: final {summary.final[column]:.6g} "
                    f"(min {summary.minimum[column]:.6g}, max {summary.maximum[column]:.6g})"
                )
        if summary.heldout_accuracy is not None:
            self.stdout.write(f"held-out accuracy: {summary.heldout_accuracy:.4f}")
        self.stdout.write(self.style.SUCCESS(f"Trained case '{summary.case}' for {summary.steps} steps"))
