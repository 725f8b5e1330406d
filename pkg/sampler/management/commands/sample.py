import logging
from pathlib import Path

import numpy as np
from django.core.management.base import BaseCommand, CommandError

from integration.checkpoint import read_checkpoint
from integration.cli import DOMAIN_ERRORS, EXIT_CONFIG, EXIT_NUMERIC, add_run_arguments, command_error
from integration.images import write_pgm
from integration.run_config import experiment_config, load_run_config, output_dir
from network.backbone import UnifiedBackbone
from sampler.euler import SampleConfig, SamplerError, euler_sample

logger = logging.getLogger(__name__)

MODEL_PREFIX = "model/"


class Command(BaseCommand):
    help = "Draws Euler samples from a trained checkpoint and writes them as PGM images"

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", type=str, required=True, help="Checkpoint written by 'train'")
        add_run_arguments(parser)
        parser.add_argument("--guidance", type=float, default=None, help="Guidance scale s (default sample.guidance_scale)")
        parser.add_argument("--label", type=int, default=None, help="Class to sample; omit for unconditional")
        parser.add_argument("--batch", type=int, default=None, help="Number of samples")
        parser.add_argument("--source", choices=["velocity", "clean"], default=None,
                            help="Velocity head or velocity recovered from the clean head")
        parser.add_argument("--dump-latents", type=str, default=None, help="Also save the final latents as .npy")

    def _sample_config(self, values, options) -> SampleConfig:
        sample = values["sample"]

        def pick(option, key):
            return sample[key] if options[option] is None else options[option]

        label = pick("label", "label")
        try:
            return SampleConfig(
                steps=pick("steps", "steps"),
                guidance_scale=pick("guidance", "guidance_scale"),
                label=None if label < 0 else label,
                batch=pick("batch", "batch"),
                seed=pick("seed", "seed"),
                source=pick("source", "source"),
            )
        except SamplerError as e:
            raise CommandError(str(e), returncode=EXIT_CONFIG) from e

    def handle(self, *args, **options):
        try:
            values = load_run_config(options["config"])
            sample_config = self._sample_config(values, options)
            config = experiment_config(values, case=options["case"])
            arrays = read_checkpoint(options["checkpoint"])
            model = UnifiedBackbone(config.model)
            model.load_state_arrays({
                name[len(MODEL_PREFIX):]: array for name, array in arrays.items() if name.startswith(MODEL_PREFIX)
            })
            out = output_dir(values, options["out"]) / "samples" / config.case_name
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        try:
            result = euler_sample(model, sample_config)
        except SamplerError as e:
            raise CommandError(str(e), returncode=EXIT_NUMERIC) from e
        except DOMAIN_ERRORS as e:
            raise command_error(e) from e

        try:
            paths = write_pgm(result.images, out)
            if options["dump_latents"]:
                dump = Path(options["dump_latents"])
                dump.parent.mkdir(parents=True, exist_ok=True)
                np.save(dump, result.latents)
                self.stdout.write(f"latents: {dump}")
        except (OSError, ValueError) as e:
            raise CommandError(f"Could not write samples: {e}", returncode=3) from e

        label = "unconditional" if sample_config.label is None else f"label {sample_config.label}"
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {len(paths)} samples ({label}, {sample_config.steps} steps) to {out}"
        ))
