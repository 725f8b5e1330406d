from django.conf import settings
from django.core.management.base import BaseCommand

from experiments.config import CaseVariant
from experiments.runner import compare_cases
from integration.cli import DOMAIN_ERRORS, add_run_arguments, command_error
from integration.run_config import experiment_config, load_run_config, output_dir

DEFAULT_CASES = ["vanilla", "decoupled", "transformed", "ema", "augmented"]


class Command(BaseCommand):
    help = "Runs several cases under one budget and writes comparison.csv and comparison.svg"

    def add_arguments(self, parser):
        add_run_arguments(parser, case=False)
        parser.add_argument("--cases", nargs="+", default=DEFAULT_CASES, help="Cases to run")
        parser.add_argument("--workers", type=int, default=1, help="Cases trained concurrently")

    def handle(self, *args, **options):
        try:
            values = load_run_config(options["config"])
            configs = [
                experiment_config(values, case=CaseVariant.from_name(name).value, seed=options["seed"],
                                  steps=options["steps"])
                for name in options["cases"]
            ]
            out = output_dir(values, options["out"])
            table = compare_cases(configs, out, workers=options["workers"], progress=settings.DSD_PROGRESS)
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        self.stdout.write(table.to_string(float_format=lambda v: f"{v:.4g}"))
        self.stdout.write(self.style.SUCCESS(f"Compared {len(table)} cases; figure at {out / 'comparison.svg'}"))
