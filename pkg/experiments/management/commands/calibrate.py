from django.core.management.base import BaseCommand

from experiments.calibration import COLLAPSE_FIXTURE, load_calibration, run_calibration, write_calibration
from integration.cli import DOMAIN_ERRORS, command_error
from integration.run_config import load_run_config, output_dir


class Command(BaseCommand):
    help = "Runs the five collapse cases at desk scale and records observed ranks and derived thresholds"

    def add_arguments(self, parser):
        parser.add_argument("--fixture", type=str, default=str(COLLAPSE_FIXTURE), help="Calibration JSON to update")
        parser.add_argument("--out", type=str, default=None, help="Output directory for the run files")
        parser.add_argument("--workers", type=int, default=5, help="Cases trained concurrently")
        parser.add_argument("--dry-run", action="store_true", help="Report without rewriting the fixture")

    def handle(self, *args, **options):
        try:
            calibration = load_calibration(options["fixture"])
            out = output_dir(load_run_config(None), options["out"]) / "calibration"
            _, _, observed, elapsed = run_calibration(calibration, out, workers=options["workers"])
            if not options["dry_run"]:
                write_calibration(calibration, observed, options["fixture"])
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        for name, value in observed.items():
            self.stdout.write(f"{name}: {value:.6g}")
        self.stdout.write(f"elapsed: {elapsed:.1f} s (budget {calibration.budget_seconds:.0f} s)")
        if elapsed > calibration.budget_seconds:
            self.stdout.write(self.style.WARNING("calibration exceeded its runtime budget"))
        if options["dry_run"]:
            self.stdout.write(self.style.SUCCESS("Calibration finished (fixture unchanged)"))
        else:
            self.stdout.write(self.style.SUCCESS(f"Calibration written to {options['fixture']}"))
