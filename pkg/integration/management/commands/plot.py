from pathlib import Path

from django.core.management.base import BaseCommand

from integration.cli import DOMAIN_ERRORS, command_error
from integration.plots import emit_plot_svg

DEFAULT_COLUMNS = ["erank_z1", "erank_z2", "erank_pred", "l_rec"]


class Command(BaseCommand):
    help = "Renders metrics CSV columns against step as an SVG line plot"

    def add_arguments(self, parser):
        parser.add_argument("csv", type=str, help="Metrics CSV written by 'train'")
        parser.add_argument("--columns", nargs="+", default=DEFAULT_COLUMNS, help="Columns to draw")
        parser.add_argument("--out", type=str, default=None, help="SVG path (default: next to the CSV)")

    def handle(self, *args, **options):
        csv_path = Path(options["csv"])
        out = Path(options["out"]) if options["out"] else csv_path.with_suffix(".svg")
        try:
            info = emit_plot_svg(csv_path, options["columns"], out)
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        self.stdout.write(f"y range: {info.ylim[0]:.6g} .. {info.ylim[1]:.6g}")
        self.stdout.write(self.style.SUCCESS(f"Plotted {len(info.series)} series to {info.path}"))
