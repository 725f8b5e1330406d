from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from integration.cli import EXIT_VERIFICATION
from integration.verification import CHECKS, VerificationFailure, run_verification


class Command(BaseCommand):
    help = "Runs the property battery (gradient checks, loss identities, erank units, sampler oracle)"

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=0, help="Seed of the random draws")
        parser.add_argument("--list", action="store_true", help="List the checks without running them")

    def handle(self, *args, **options):
        if options["list"]:
            for check in CHECKS:
                self.stdout.write(f"{check.name} (tolerance {check.tolerance:g})")
            return

        try:
            report = run_verification(seed=options["seed"], progress=settings.DSD_PROGRESS)
        except VerificationFailure as e:
            for name, reason in e.failures:
                self.stdout.write(self.style.WARNING(f"FAIL {name}: {reason}"))
            passed = len(e.report.passed) if e.report else 0
            raise CommandError(f"{passed}/{passed + len(e.failures)} checks passed; {e}",
                               returncode=EXIT_VERIFICATION) from e

        for name in report.passed:
            self.stdout.write(f"ok {name}")
        self.stdout.write(self.style.SUCCESS(f"{len(report.passed)}/{report.total} checks passed"))
