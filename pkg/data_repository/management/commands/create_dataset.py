from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from data_repository.datasets import DatasetError
from data_repository.idx_import import IDXImportError, export_dataset
from data_repository.synthetic import synth_dataset


class Command(BaseCommand):
    help = "Synthesizes a procedural shape dataset and writes it as an IDX image/label pair"

    def add_arguments(self, parser):
        parser.add_argument("--classes", type=int, default=10, help="Number of shape classes")
        parser.add_argument("--per-class", type=int, default=100, help="Images per class")
        parser.add_argument("--image-size", type=int, default=32, help="Image side in pixels")
        parser.add_argument("--seed", type=int, default=None, help="Generator seed")
        parser.add_argument("--out", type=str, default=None, help="Output directory (default DSD_OUT_DIR/data)")
        parser.add_argument("--prefix", type=str, default="synthetic", help="File name prefix")

    def handle(self, *args, **options):
        seed = settings.DSD_DEFAULT_SEED if options["seed"] is None else options["seed"]
        out_dir = Path(options["out"] or Path(settings.DSD_OUT_DIR) / "data")

        try:
            dataset = synth_dataset(options["classes"], options["per_class"], options["image_size"], seed)
        except DatasetError as e:
            raise CommandError(str(e), returncode=2)

        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            images_path = out_dir / f"{options['prefix']}-images-idx3-ubyte"
            labels_path = out_dir / f"{options['prefix']}-labels-idx1-ubyte"
            export_dataset(dataset, images_path, labels_path)
        except (OSError, IDXImportError) as e:
            raise CommandError(f"Could not write dataset to {out_dir}: {e}", returncode=3)

        self.stdout.write(f"images: {images_path}")
        self.stdout.write(f"labels: {labels_path}")
        self.stdout.write(
            self.style.SUCCESS(f"Wrote {len(dataset)} images in {dataset.class_count} classes (seed {seed})")
        )
