import re
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from data_repository.datasets import DatasetError
from data_repository.idx_import import IDXImportError
from experiments.config import CaseVariant, MetricsRecord
from experiments.trainer import TrainingAborted

from .checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint
from .cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, command_error, exit_code
from .images import pgm_bytes, quantize, read_pgm, write_pgm
from .metrics_csv import (
    MetricsFormatError,
    metrics_frame,
    read_metrics_csv,
    truncate_metrics_csv,
    write_metrics_csv,
)
from .plots import PlotError, emit_comparison_svg, emit_plot_svg, padded_range
from .run_config import DEFAULTS, RunConfigError, experiment_config, load_run_config, output_dir
from .verification import CHECKS, Check, VerificationFailure, run_verification


def make_record(step, scale=1.0):
    return MetricsRecord(
        step=step, erank_z1=4.0 * scale, erank_z2=3.5 * scale, erank_pred=2.25 * scale,
        l_rec=0.1 / step, l_main=1.0 / 3.0 + step, l_velo=1e-300, l_cls=0.0, grad_norm=2.5, wall_ms=0.0,
    )


class TempDirMixin:
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.root / name
        path.write_text(text)
        return path


class RunConfigTests(TempDirMixin, SimpleTestCase):
    def test_defaults_without_file(self):
        values = load_run_config()
        self.assertEqual(values, {section: dict(keys) for section, keys in DEFAULTS.items()})
        self.assertEqual(values["sample"]["steps"], 64)

    def test_values_coerced_to_default_types(self):
        path = self.write("run.ini", "[train]\nsteps = 5\nlearning_rate = 2e-3\n\n[io]\nwall_clock = no\n")
        values = load_run_config(str(path))
        self.assertEqual(values["train"]["steps"], 5)
        self.assertEqual(values["train"]["learning_rate"], 2e-3)
        self.assertIs(values["io"]["wall_clock"], False)
        self.assertEqual(values["train"]["batch_size"], DEFAULTS["train"]["batch_size"])

    def test_unknown_key_rejected(self):
        path = self.write("run.ini", "[train]\nstpes = 5\n")
        with self.assertRaises(RunConfigError) as ctx:
            load_run_config(str(path))
        self.assertEqual(ctx.exception.section, "train")
        self.assertEqual(ctx.exception.key, "stpes")

    def test_unknown_section_rejected(self):
        path = self.write("run.ini", "[optimizer]\nlr = 1\n")
        with self.assertRaises(RunConfigError) as ctx:
            load_run_config(str(path))
        self.assertEqual(ctx.exception.section, "optimizer")

    def test_bad_value_rejected(self):
        path = self.write("run.ini", "[io]\nwall_clock = sometimes\n")
        with self.assertRaises(RunConfigError):
            load_run_config(str(path))

    def test_experiment_config_overrides(self):
        config = experiment_config(load_run_config(), case="decoupled", seed=9, steps=12)
        self.assertIs(config.variant, CaseVariant.DECOUPLED)
        self.assertEqual((config.seed, config.steps), (9, 12))
        self.assertEqual(config.augment.patch_size, config.model.patch_size)

    def test_invalid_case_is_config_error(self):
        with self.assertRaises(RunConfigError):
            experiment_config(load_run_config(), case="case-six")

    def test_negative_weight_is_config_error(self):
        values = load_run_config()
        values["train"]["lambda_rec"] = -1.0
        with self.assertRaises(RunConfigError):
            experiment_config(values)

    def test_output_dir_precedence(self):
        values = load_run_config()
        with override_settings(DSD_OUT_DIR=self.root / "settings"):
            self.assertEqual(output_dir(values), self.root / "settings")
            values["io"]["out_dir"] = str(self.root / "file")
            self.assertEqual(output_dir(values), self.root / "file")
            self.assertEqual(output_dir(values, str(self.root / "flag")), self.root / "flag")

    def test_unknown_key_exits_with_config_code(self):
        path = self.write("run.ini", "[model]\nwidth = 3\n")
        with self.assertRaises(CommandError) as ctx:
            call_command("train", "--config", str(path), "--out", str(self.root), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)


class ExitCodeTests(SimpleTestCase):
    def test_error_groups(self):
        self.assertEqual(exit_code(RunConfigError("bad")), EXIT_CONFIG)
        self.assertEqual(exit_code(IDXImportError("bad", code="truncated")), EXIT_DATA)
        self.assertEqual(exit_code(CheckpointError("bad", code="checksum")), EXIT_DATA)
        self.assertEqual(exit_code(DatasetError("bad", field="labels")), EXIT_DATA)
        self.assertEqual(exit_code(TrainingAborted("nan loss", step=3)), EXIT_NUMERIC)
        self.assertEqual(exit_code(KeyError("other")), 1)

    def test_command_error_keeps_message(self):
        error = command_error(MetricsFormatError("Header must be ...", path="m.csv", line_num=1))
        self.assertEqual(error.returncode, EXIT_DATA)
        self.assertIn("at line 1", str(error))


class MetricsCsvTests(TempDirMixin, SimpleTestCase):
    def test_round_trip_is_exact(self):
        path = self.root / "m.csv"
        records = [make_record(1), make_record(10, scale=1.0 / 7.0), make_record(20)]
        write_metrics_csv(path, records)
        self.assertEqual(read_metrics_csv(path), records)

    def test_append_after_header(self):
        path = self.root / "m.csv"
        write_metrics_csv(path)
        write_metrics_csv(path, [make_record(1)], append=True)
        write_metrics_csv(path, [make_record(2)], append=True)
        lines = path.read_text().splitlines()
        self.assertEqual(lines[0], "step,erank_z1,erank_z2,erank_pred,l_rec,l_main,l_velo,l_cls,grad_norm,wall_ms")
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[1].startswith("1,4,3.5,2.25,"))

    def test_header_only_file(self):
        path = write_metrics_csv(self.root / "m.csv")
        self.assertEqual(read_metrics_csv(path), [])
        self.assertTrue(metrics_frame(path).empty)

    def test_wrong_header_rejected(self):
        path = self.write("m.csv", "step,erank\n1,2\n")
        with self.assertRaises(MetricsFormatError) as ctx:
            read_metrics_csv(path)
        self.assertEqual(ctx.exception.line_num, 1)

    def test_bad_row_reports_line(self):
        path = write_metrics_csv(self.root / "m.csv", [make_record(1)])
        with open(path, "a") as f:
            f.write("2,x,1,1,1,1,1,1,1,1\n")
        with self.assertRaises(MetricsFormatError) as ctx:
            read_metrics_csv(path)
        self.assertEqual(ctx.exception.line_num, 3)

    def test_non_finite_rejected(self):
        path = write_metrics_csv(self.root / "m.csv")
        with open(path, "a") as f:
            f.write("1,nan,1,1,1,1,1,1,1,1\n")
        with self.assertRaises(MetricsFormatError):
            read_metrics_csv(path)

    def test_truncate_keeps_earlier_steps(self):
        path = write_metrics_csv(self.root / "m.csv", [make_record(s) for s in (1, 10, 20, 30)])
        self.assertEqual(truncate_metrics_csv(path, 20), 3)
        self.assertEqual([r.step for r in read_metrics_csv(path)], [1, 10, 20])

    def test_frame_indexed_by_step(self):
        path = write_metrics_csv(self.root / "m.csv", [make_record(1), make_record(10)])
        frame = metrics_frame(path)
        self.assertEqual(list(frame.index), [1, 10])
        self.assertAlmostEqual(frame.loc[10, "l_rec"], 0.01, places=15)


class CheckpointTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        rng = np.random.default_rng(3)
        self.tensors = {
            "model/w": rng.normal(size=(3, 4)),
            "model/b": rng.normal(size=(4,)),
            "ema/w": rng.normal(size=(3, 4)),
            "meta/step": np.array(17.0),
        }

    def test_save_load_save_byte_identical(self):
        first = write_checkpoint(self.root / "a.ckpt", self.tensors)
        loaded = read_checkpoint(first)
        second = write_checkpoint(self.root / "b.ckpt", loaded)
        self.assertEqual(first.read_bytes(), second.read_bytes())
        self.assertEqual(list(loaded), list(self.tensors))
        for name, array in self.tensors.items():
            np.testing.assert_array_equal(loaded[name], array)
        self.assertEqual(loaded["meta/step"].shape, ())

    def test_no_temporary_file_left(self):
        write_checkpoint(self.root / "a.ckpt", self.tensors)
        self.assertEqual(sorted(p.name for p in self.root.iterdir()), ["a.ckpt"])

    def test_corrupted_payload_byte(self):
        data = bytearray(encode_checkpoint(self.tensors))
        data[-10] ^= 0xFF
        with self.assertRaises(CheckpointError) as ctx:
            decode_checkpoint(bytes(data))
        self.assertEqual(ctx.exception.code, "checksum")

    def test_truncated_file(self):
        data = encode_checkpoint(self.tensors)
        with self.assertRaises(CheckpointError) as ctx:
            decode_checkpoint(data[:-3])
        self.assertEqual(ctx.exception.code, "truncated")

    def test_bad_magic(self):
        data = b"XXXX" + encode_checkpoint(self.tensors)[4:]
        with self.assertRaises(CheckpointError) as ctx:
            decode_checkpoint(data)
        self.assertEqual(ctx.exception.code, "bad-magic")

    def test_missing_ema_section(self):
        path = write_checkpoint(self.root / "a.ckpt", {k: v for k, v in self.tensors.items() if k != "ema/w"})
        self.assertIn("model/w", read_checkpoint(path))
        with self.assertRaises(CheckpointError) as ctx:
            read_checkpoint(path, require_ema=True)
        self.assertEqual(ctx.exception.code, "missing-ema")

    def test_unreadable_path(self):
        with self.assertRaises(CheckpointError) as ctx:
            read_checkpoint(self.root / "absent.ckpt")
        self.assertEqual(ctx.exception.code, "unreadable")


class PlotTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.csv = write_metrics_csv(self.root / "full.csv", [make_record(s) for s in (1, 10, 20)])

    def test_two_series_with_legend(self):
        info = emit_plot_svg(self.csv, ["erank_z1", "erank_pred"], self.root / "plot.svg")
        self.assertEqual(info.series, ("erank_z1", "erank_pred"))
        self.assertEqual(info.legend, ("erank_z1", "erank_pred"))
        svg = info.path.read_text()
        self.assertIn('id="series-erank_z1"', svg)
        self.assertIn('id="series-erank_pred"', svg)

    def test_padded_y_range(self):
        info = emit_plot_svg(self.csv, ["erank_z1", "erank_pred"], self.root / "plot.svg")
        low, high = info.ylim
        self.assertAlmostEqual(low, 2.25 - 0.05 * 1.75)
        self.assertAlmostEqual(high, 4.0 + 0.05 * 1.75)
        np.testing.assert_allclose(padded_range([2.0, 2.0]), (1.9, 2.1))

    def test_identical_input_identical_bytes(self):
        a = emit_plot_svg(self.csv, ["l_rec"], self.root / "a.svg").path.read_bytes()
        b = emit_plot_svg(self.csv, ["l_rec"], self.root / "b.svg").path.read_bytes()
        self.assertEqual(a, b)

    def test_empty_csv_rejected(self):
        empty = write_metrics_csv(self.root / "empty.csv")
        with self.assertRaises(PlotError):
            emit_plot_svg(empty, ["erank_z1"], self.root / "plot.svg")

    def test_missing_column_rejected(self):
        with self.assertRaises(PlotError) as ctx:
            emit_plot_svg(self.csv, ["erank_z9"], self.root / "plot.svg")
        self.assertEqual(ctx.exception.column, "erank_z9")

    def test_comparison_panels(self):
        frame = metrics_frame(self.csv)
        path = emit_comparison_svg({"vanilla": frame, "ema": frame}, self.root / "comparison.svg")
        svg = path.read_text()
        for gid in ("vanilla-erank_z1", "ema-erank_pred", "ema-l_rec"):
            self.assertIn(f'id="{gid}"', svg)

    def test_comparison_series_colours_distinct(self):
        frame = metrics_frame(self.csv)
        svg = emit_comparison_svg({"vanilla": frame, "ema": frame}, self.root / "comparison.svg").read_text()
        colours = {}
        for column in ("erank_z1", "erank_z2", "erank_pred", "l_rec"):
            match = re.search(rf'id="ema-{column}">\s*<path[^>]*?stroke: (#[0-9a-f]{{6}})', svg)
            self.assertIsNotNone(match, msg=column)
            colours[column] = match.group(1)
        self.assertEqual(len(set(colours.values())), 4)
        self.assertEqual(colours["l_rec"], "#ff7f0e")
        self.assertEqual(colours["erank_z2"], "#2ca02c")

    def test_plot_command_defaults_draw_erank_and_l_rec(self):
        out = StringIO()
        call_command("plot", str(self.csv), stdout=out)
        svg = (self.root / "full.svg").read_text()
        for column in ("erank_z1", "erank_z2", "erank_pred", "l_rec"):
            self.assertIn(f'id="series-{column}"', svg)
        self.assertIn("Plotted 4 series", out.getvalue())

    def test_plot_command(self):
        out = StringIO()
        call_command("plot", str(self.csv), "--columns", "l_main", "l_rec", stdout=out)
        self.assertTrue((self.root / "full.svg").exists())
        self.assertIn("Plotted 2 series", out.getvalue())

    def test_plot_command_empty_csv_is_data_error(self):
        empty = write_metrics_csv(self.root / "empty.csv")
        with self.assertRaises(CommandError) as ctx:
            call_command("plot", str(empty), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_DATA)


class PgmTests(TempDirMixin, SimpleTestCase):
    def test_half_rounds_up(self):
        data = pgm_bytes(np.full((2, 3), 0.5))
        self.assertEqual(data[:11], b"P5\n3 2\n255\n")
        self.assertEqual(data[11:], bytes([128] * 6))

    def test_written_file_is_raw_p5(self):
        image = np.array([[0.0, 0.25, 1.0], [0.5, 0.75, 0.1]])
        (path,) = write_pgm(image[None], self.root)
        self.assertEqual(path.read_bytes(), b"P5\n3 2\n255\n" + quantize(image).tobytes())
        self.assertEqual(path.read_bytes(), pgm_bytes(image))

    def test_quantize_extremes(self):
        np.testing.assert_array_equal(quantize([0.0, 1.0, 1.0 / 255.0]), [0, 255, 1])

    def test_write_and_read_back(self):
        images = np.random.default_rng(0).uniform(size=(3, 1, 4, 5))
        paths = write_pgm(images, self.root / "samples")
        self.assertEqual([p.name for p in paths], ["sample_0000.pgm", "sample_0001.pgm", "sample_0002.pgm"])
        np.testing.assert_allclose(read_pgm(paths[1]), quantize(images[1, 0]) / 255.0)

    def test_out_of_range_clamped_with_warning(self):
        images = np.array([[[-0.5, 0.2], [1.5, 0.9]]])
        with self.assertLogs("integration.images", level="WARNING") as logs:
            (path,) = write_pgm(images, self.root)
        self.assertIn("clamped 2 pixel values", logs.output[0])
        self.assertEqual(read_pgm(path)[0, 0], 0.0)
        self.assertEqual(read_pgm(path)[1, 0], 1.0)

    def test_multichannel_rejected(self):
        with self.assertRaises(ValueError):
            pgm_bytes(np.zeros((3, 2, 2)))


class VerificationTests(SimpleTestCase):
    def test_cheap_checks_pass(self):
        cheap = [c for c in CHECKS if c.name.startswith(("erank", "sampler", "variance", "equivalence"))]
        report = run_verification(seed=1, checks=cheap)
        self.assertEqual(len(report.passed), len(cheap))
        self.assertTrue(report.ok)

    def test_failures_collected(self):
        checks = (
            Check("always-ok", lambda rng: 0.0, 1e-9),
            Check("too-large", lambda rng: 1.0, 1e-9),
            Check("not-finite", lambda rng: float("nan"), 1e-9),
        )
        with self.assertRaises(VerificationFailure) as ctx:
            run_verification(checks=checks)
        self.assertEqual([name for name, _ in ctx.exception.failures], ["too-large", "not-finite"])
        self.assertEqual(ctx.exception.report.passed, ["always-ok"])

    def test_verify_command_prints_pass_count(self):
        out = StringIO()
        call_command("verify", stdout=out)
        self.assertIn(f"{len(CHECKS)}/{len(CHECKS)} checks passed", out.getvalue())

    def test_verify_command_failure_exit_code(self):
        failure = VerificationFailure("1 of 1 checks failed", failures=[("x", "error")])
        with mock.patch("integration.management.commands.verify.run_verification", side_effect=failure):
            with self.assertRaises(CommandError) as ctx:
                call_command("verify", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 5)
