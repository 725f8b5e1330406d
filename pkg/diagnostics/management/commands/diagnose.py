import logging
from pathlib import Path

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from diagnostics.spectrum import SpectrumError, batch_latent_matrix, spectrum_report

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Reports the singular spectrum and effective rank of a saved latent dump (.npy)"

    def add_arguments(self, parser):
        parser.add_argument("latents", type=str, help="Path to a .npy array of shape batch×tokens×dim or rows×dim")
        parser.add_argument(
            "--against",
            type=str,
            default=None,
            help="Second latent dump; prints the rank gap erank(latents) - erank(against)",
        )
        parser.add_argument("--top", type=int, default=8, help="Number of singular values to print")

    def _load(self, path: str) -> np.ndarray:
        path = Path(path)
        if not path.exists():
            raise CommandError(f"Latent dump not found: {path}", returncode=3)
        try:
            return batch_latent_matrix(np.load(path, allow_pickle=False))
        except (ValueError, OSError) as e:
            raise CommandError(f"Could not read latent dump {path}: {e}", returncode=3)
        except SpectrumError as e:
            raise CommandError(str(e), returncode=3)

    def handle(self, *args, **options):
        matrix = self._load(options["latents"])
        try:
            report = spectrum_report(matrix)
        except SpectrumError as e:
            raise CommandError(str(e), returncode=4)

        top = ", ".join(f"{v:.6g}" for v in report.singular_values[: options["top"]])
        self.stdout.write(f"matrix: {report.matrix_shape[0]}x{report.matrix_shape[1]}")
        self.stdout.write(f"singular values: {top}")
        self.stdout.write(f"retained (> {report.nonzero_threshold:g}·σmax): {report.retained}")
        self.stdout.write(self.style.SUCCESS(f"erank: {report.erank:.6f}"))

        if options["against"]:
            other = self._load(options["against"])
            try:
                gap = report.erank - spectrum_report(other).erank
            except SpectrumError as e:
                raise CommandError(str(e), returncode=4)
            style = self.style.SUCCESS if gap > 0 else self.style.WARNING
            self.stdout.write(style(f"rank gap: {gap:+.6f}"))
