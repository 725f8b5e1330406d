import os
import tempfile
import unittest
from dataclasses import replace
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from augmentation.pipeline import AugmentConfig
from autodiff.tensor import GradTape, backward
from data_repository.idx_import import write_idx
from data_repository.synthetic import synth_dataset
from integration.checkpoint import read_checkpoint
from integration.metrics_csv import metrics_frame, read_metrics_csv
from network.backbone import UnifiedBackbone
from network.config import ModelConfig
from network.ema import TargetEncoder
from objectives.flow import loss_clean
from sampler.euler import SampleConfig, euler_sample

from .calibration import ACCEPTANCE_BOUNDS, derive_thresholds, load_calibration, run_calibration, write_calibration
from .config import CaseVariant, DatasetSpec, ExperimentConfig, ExperimentError, LossWeights, MetricsRecord
from .runner import compare_cases, compare_frames, load_dataset, run_case, summarize_metrics
from .trainer import TrainingAborted, init_state, latent_erank, should_log, train_step
from .wiring import TERM_NAMES, assemble_loss, check_wiring, drop_labels

RUN_SLOW = os.environ.get("DSD_RUN_SLOW") == "1"


def tiny_model(**overrides) -> ModelConfig:
    values = dict(
        image_size=8, channels=1, patch_size=4, trunk_layers=1, hidden_dim=8, attention_heads=2,
        latent_dim=4, register_count=2, class_count=3, time_embed_dim=8, mlp_ratio=2,
        teacher_dim=4, init_std=0.3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def tiny_experiment(variant, **overrides) -> ExperimentConfig:
    values = dict(
        variant=CaseVariant.from_name(variant) if isinstance(variant, str) else variant,
        model=tiny_model(),
        augment=AugmentConfig(patch_size=4),
        dataset=DatasetSpec(samples_per_class=6, holdout=0.25),
        steps=4,
        batch_size=4,
        metrics_every=2,
        wall_clock=False,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def randomize_modulation(model, rng, scale=0.2):
    for name, param in model.params.items():
        if ".ada." in name:
            param.assign(rng.normal(scale=scale, size=param.shape))


class WiringFixture:
    def setUp(self):
        rng = np.random.default_rng(0)
        self.images = rng.uniform(size=(4, 1, 8, 8))
        self.labels = np.array([0, 1, 2, 0])

    def assemble(self, variant, weights=None, seed=0, run_seed=0):
        config = tiny_experiment(variant, weights=weights or LossWeights(), seed=run_seed)
        model = UnifiedBackbone(config.model, seed=3)
        randomize_modulation(model, np.random.default_rng(3))
        target = TargetEncoder.from_model(model) if config.variant.uses_ema else None
        with GradTape() as tape:
            tape.watch(model.params)
            breakdown = assemble_loss(config, self.images, self.labels, model, target,
                                      np.random.default_rng(seed))
        return breakdown, tape, model


class CaseVariantTests(SimpleTestCase):
    def test_names_and_aliases(self):
        self.assertIs(CaseVariant.from_name("Vanilla"), CaseVariant.VANILLA_JOINT)
        self.assertIs(CaseVariant.from_name("vanilla_joint"), CaseVariant.VANILLA_JOINT)
        self.assertIs(CaseVariant.from_name("EMA-target"), CaseVariant.EMA_TARGET)
        self.assertIs(CaseVariant.from_name("dsd"), CaseVariant.FULL_DSD)
        with self.assertRaises(ExperimentError):
            CaseVariant.from_name("case6")

    def test_variant_table(self):
        rows = {v: (v.parameterization, v.uses_ema, v.uses_augmentation, v.target_requires_grad) for v in CaseVariant}
        self.assertEqual(rows[CaseVariant.VANILLA_JOINT], ("velocity", False, False, True))
        self.assertEqual(rows[CaseVariant.DECOUPLED], ("velocity", False, False, False))
        self.assertEqual(rows[CaseVariant.TRANSFORMED], ("clean", False, False, False))
        self.assertEqual(rows[CaseVariant.EMA_TARGET], ("clean", True, False, False))
        self.assertEqual(rows[CaseVariant.AUGMENTED], ("clean", True, True, False))
        self.assertEqual(rows[CaseVariant.FULL_DSD], ("clean", True, True, False))

    def test_config_validation(self):
        with self.assertRaises(ExperimentError):
            tiny_experiment("ema", ema_decay=1.0)
        with self.assertRaises(ExperimentError):
            tiny_experiment("full", align_layer=1)
        with self.assertRaises(ExperimentError):
            LossWeights(cls=float("nan"))

    def test_budget_ignores_variant(self):
        self.assertEqual(tiny_experiment("vanilla").budget(), tiny_experiment("ema").budget())
        self.assertNotEqual(tiny_experiment("vanilla").budget(), tiny_experiment("ema", steps=5).budget())

    def test_metrics_record_row(self):
        record = MetricsRecord(1, 4.0, 3.0, 2.0, 0.1, 0.2, 0.0, 0.0, 1.5, 0.0)
        self.assertEqual(MetricsRecord.from_row(record.as_row()), record)
        self.assertEqual(record.rank_gap, 1.0)


class WiringTests(WiringFixture, SimpleTestCase):
    def test_every_variant_wires_correctly(self):
        for variant in CaseVariant:
            with self.subTest(variant=variant.value):
                breakdown, _, _ = self.assemble(variant)
                check_wiring(variant, breakdown)
                self.assertTrue(np.isfinite(breakdown.total.item()))

    def test_vanilla_gradient_reaches_target_and_decoupled_does_not(self):
        only_main = LossWeights(rec=0.0)
        vanilla, vanilla_tape, model = self.assemble(CaseVariant.VANILLA_JOINT, only_main)
        decoupled, decoupled_tape, _ = self.assemble(CaseVariant.DECOUPLED, only_main)

        self.assertIs(vanilla.z2, vanilla.z1)
        self.assertFalse(decoupled.z2.tracked)
        self.assertAlmostEqual(vanilla.total.item(), decoupled.total.item(), delta=1e-12)

        vanilla_grads = backward(vanilla.total, vanilla_tape)
        decoupled_grads = backward(decoupled.total, decoupled_tape)
        difference = max(np.max(np.abs(vanilla_grads[n] - decoupled_grads[n])) for n in model.encoder_names())
        self.assertGreater(difference, 1e-8)

    def test_full_total_is_weighted_sum(self):
        weights = LossWeights(dsd=0.7, velo=1.3, rec=2.0, cls=0.1, repsd=0.5, align=0.25)
        breakdown, _, _ = self.assemble(CaseVariant.FULL_DSD, weights)
        expected = sum(breakdown.weights[name] * term.item() for name, term in breakdown.terms.items())
        self.assertAlmostEqual(breakdown.total.item(), expected, delta=1e-12)
        self.assertEqual(set(breakdown.terms), set(TERM_NAMES))

    def test_reconstruction_only_weights(self):
        weights = LossWeights(dsd=0.0, velo=0.0, rec=1.0, cls=0.0, repsd=0.0, align=0.0)
        breakdown, _, _ = self.assemble(CaseVariant.FULL_DSD, weights)
        self.assertAlmostEqual(breakdown.total.item(), breakdown.terms["rec"].item(), delta=1e-12)

    def test_transformed_main_is_clean_latent_loss(self):
        breakdown, _, _ = self.assemble(CaseVariant.TRANSFORMED)
        expected = loss_clean(breakdown.prediction, breakdown.z2, breakdown.t).item()
        self.assertAlmostEqual(breakdown.terms["main"].item(), expected, delta=1e-12)
        self.assertEqual(set(breakdown.terms), {"main", "rec"})

    def test_ema_target_is_detached_copy(self):
        breakdown, _, _ = self.assemble(CaseVariant.EMA_TARGET)
        self.assertFalse(breakdown.z2.tracked)
        # a fresh shadow equals the online encoder
        np.testing.assert_allclose(breakdown.z2.data, breakdown.z1.data, atol=1e-12)

    def test_augmented_online_view_differs(self):
        breakdown, _, _ = self.assemble(CaseVariant.AUGMENTED)
        self.assertFalse(np.array_equal(breakdown.online_input, breakdown.images))
        plain, _, _ = self.assemble(CaseVariant.EMA_TARGET)
        self.assertIs(plain.online_input, plain.images)

    def test_augmented_views_follow_the_run_seed(self):
        first, _, _ = self.assemble(CaseVariant.AUGMENTED, run_seed=0)
        again, _, _ = self.assemble(CaseVariant.AUGMENTED, run_seed=0)
        other, _, _ = self.assemble(CaseVariant.AUGMENTED, run_seed=1)
        np.testing.assert_array_equal(first.online_input, again.online_input)
        self.assertFalse(np.array_equal(first.online_input, other.online_input))

    def test_tampered_breakdown_rejected(self):
        breakdown, _, _ = self.assemble(CaseVariant.TRANSFORMED)
        with self.assertRaises(ExperimentError):
            check_wiring(CaseVariant.FULL_DSD, breakdown)
        with self.assertRaises(ExperimentError):
            check_wiring(CaseVariant.VANILLA_JOINT, breakdown)
        extra = replace(breakdown, terms=dict(breakdown.terms, cls=breakdown.terms["rec"]))
        with self.assertRaises(ExperimentError):
            check_wiring(CaseVariant.TRANSFORMED, extra)

    def test_ema_variant_without_target_rejected(self):
        config = tiny_experiment("ema")
        model = UnifiedBackbone(config.model)
        with self.assertRaises(ExperimentError):
            assemble_loss(config, self.images, self.labels, model, None, np.random.default_rng(0))

    def test_empty_batch_rejected(self):
        config = tiny_experiment("transformed")
        model = UnifiedBackbone(config.model)
        with self.assertRaises(ExperimentError):
            assemble_loss(config, np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int), model, None,
                          np.random.default_rng(0))

    def test_drop_labels(self):
        rng = np.random.default_rng(0)
        labels = np.zeros(10000, dtype=int)
        dropped = drop_labels(labels, 0.1, 3, rng)
        self.assertTrue(set(np.unique(dropped)) <= {0, 3})
        self.assertAlmostEqual(np.mean(dropped == 3), 0.1, delta=0.02)
        np.testing.assert_array_equal(drop_labels(labels[:5], 0.0, 3, rng), labels[:5])


class TrainStepTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        data = synth_dataset(3, 4, 8, seed=0)
        cls.batch = data.batch(np.arange(4))

    def test_zero_latents_record_full_collapse(self):
        with self.assertLogs("experiments.trainer", level="WARNING"):
            self.assertEqual(latent_erank(np.zeros((4, 2, 3))), 1.0)

    def test_logging_schedule(self):
        config = tiny_experiment("transformed", steps=25, metrics_every=10)
        self.assertEqual([s for s in range(1, 26) if should_log(s, config)], [1, 10, 20, 25])

    def test_target_only_for_ema_variants(self):
        self.assertIsNone(init_state(tiny_experiment("transformed")).target)
        self.assertIsNotNone(init_state(tiny_experiment("augmented")).target)

    def test_clipped_gradient_norm(self):
        for clip in (3.0, 1e-3):
            config = tiny_experiment("full", grad_clip=clip, metrics_every=1)
            state = init_state(config)
            for _ in range(2):
                state, record = train_step(state, self.batch, config)
                self.assertLessEqual(record.grad_norm, clip + 1e-9)
            self.assertEqual(state.step, 2)

    def test_step_is_deterministic(self):
        config = tiny_experiment("augmented", metrics_every=1)
        runs = []
        for _ in range(2):
            state = init_state(config)
            state, first = train_step(state, self.batch, config)
            state, second = train_step(state, self.batch, config)
            runs.append((first, second, state.model.state_arrays()))
        self.assertEqual(runs[0][:2], runs[1][:2])
        for name, array in runs[0][2].items():
            np.testing.assert_array_equal(array, runs[1][2][name])

    def test_ema_target_moves(self):
        config = tiny_experiment("ema", metrics_every=1)
        state = init_state(config)
        before = {n: a.copy() for n, a in state.target.state_arrays().items()}
        state, _ = train_step(state, self.batch, config)
        moved = any(not np.array_equal(before[n], a) for n, a in state.target.state_arrays().items())
        self.assertTrue(moved)

    def test_non_finite_loss_aborts(self):
        config = tiny_experiment("transformed")
        state = init_state(config)
        name = state.model.encoder_names()[0]
        state.model.params[name].assign(np.full(state.model.params[name].shape, np.nan))
        with self.assertRaises(TrainingAborted) as ctx:
            train_step(state, self.batch, config)
        self.assertEqual(ctx.exception.step, 1)

    def test_state_arrays_round_trip(self):
        config = tiny_experiment("ema", metrics_every=1)
        state = init_state(config)
        state, _ = train_step(state, self.batch, config)
        fresh = init_state(config)
        fresh.load_state_arrays(state.state_arrays())
        self.assertEqual(fresh.step, 1)
        for name, array in state.state_arrays().items():
            np.testing.assert_array_equal(fresh.state_arrays()[name], array)


class RunCaseTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_writes_metrics_and_checkpoint(self):
        config = tiny_experiment("full", steps=5)
        summary = run_case(config, self.root)
        self.assertEqual(summary.metrics_path, self.root / "full.csv")
        self.assertTrue(summary.checkpoint_path.exists())
        self.assertEqual([r.step for r in read_metrics_csv(summary.metrics_path)], [1, 2, 4, 5])
        self.assertEqual(summary.steps, 5)
        self.assertTrue(0.0 <= summary.heldout_accuracy <= 1.0)
        self.assertGreaterEqual(summary.final["erank_z1"], 1.0)

    def test_same_seed_identical_csv(self):
        config = tiny_experiment("transformed", steps=3)
        first = run_case(config, self.root / "a").metrics_path.read_bytes()
        second = run_case(config, self.root / "b").metrics_path.read_bytes()
        self.assertEqual(first, second)

    def test_resume_continues_the_stream(self):
        config = tiny_experiment("augmented", steps=6, metrics_every=1)
        whole = run_case(config, self.root / "whole")

        half = run_case(config.with_overrides(steps=3), self.root / "split")
        resumed = run_case(config, self.root / "split", resume=str(half.checkpoint_path))
        self.assertEqual(resumed.metrics_path.read_bytes(), whole.metrics_path.read_bytes())

    def test_synthetic_dataset_size(self):
        dataset = load_dataset(tiny_experiment("full"))
        self.assertEqual(len(dataset), 18)


class ComparisonTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_summarize_metrics(self):
        frame = pd.DataFrame({
            "step": [1, 10, 20], "erank_z1": [3.0, 2.0, 1.5], "erank_z2": [3.0, 2.0, 1.5],
            "erank_pred": [2.0, 2.5, 1.0], "l_rec": [1.0, 0.5, 0.25], "l_main": [2.0, 1.0, 1.5],
            "l_velo": 0.0, "l_cls": 0.0, "grad_norm": 1.0, "wall_ms": 0.0,
        }).set_index("step")
        row = summarize_metrics("transformed", frame)
        self.assertEqual(row["final_erank_z1"], 1.5)
        self.assertEqual(row["max_erank_z1"], 3.0)
        self.assertEqual(row["l_rec_delta"], -0.75)
        self.assertAlmostEqual(row["rank_gap_fraction"], 2.0 / 3.0)
        self.assertEqual(row["l_main_roughness"], 0.75)

    def test_frames_of_different_length_rejected(self):
        short = pd.DataFrame({"erank_z1": [1.0]}, index=pd.Index([10], name="step"))
        long = pd.DataFrame({"erank_z1": [1.0]}, index=pd.Index([20], name="step"))
        with self.assertRaises(ExperimentError):
            compare_frames({"vanilla": short, "ema": long})

    def test_budget_mismatch_rejected_before_training(self):
        configs = [tiny_experiment("vanilla", steps=2), tiny_experiment("ema", steps=3)]
        with self.assertRaises(ExperimentError):
            compare_cases(configs, self.root)
        self.assertEqual(list(self.root.iterdir()), [])

    def test_two_case_report(self):
        configs = [tiny_experiment("vanilla", steps=2), tiny_experiment("transformed", steps=2)]
        table = compare_cases(configs, self.root)
        self.assertEqual(list(table.index), ["vanilla", "transformed"])
        self.assertTrue((self.root / "comparison.svg").exists())
        self.assertEqual(len(pd.read_csv(self.root / "comparison.csv")), 2)

    def test_parallel_workers_match_serial(self):
        configs = [tiny_experiment("decoupled", steps=2), tiny_experiment("ema", steps=2)]
        serial = compare_cases(configs, self.root / "serial")
        parallel = compare_cases(configs, self.root / "parallel", workers=2)
        pd.testing.assert_frame_equal(serial, parallel)


TINY_RUN_INI = """
[model]
image_size = 8
patch_size = 4
trunk_layers = 1
hidden_dim = 8
attention_heads = 2
latent_dim = 4
register_count = 2
class_count = 3
time_embed_dim = 8
teacher_dim = 4

[train]
steps = 2
batch_size = 4
metrics_every = 1

[data]
samples_per_class = 4

[io]
wall_clock = no
"""


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / "run.ini"
        self.config.write_text(TINY_RUN_INI)

    def tearDown(self):
        self.tmp.cleanup()

    def test_train_command(self):
        out = StringIO()
        call_command("train", "--config", str(self.config), "--out", str(self.root), "--case", "transformed",
                     "--no-progress", stdout=out)
        self.assertIn("Trained case 'transformed' for 2 steps", out.getvalue())
        self.assertEqual(list(metrics_frame(self.root / "transformed.csv").index), [1, 2])
        self.assertTrue((self.root / "transformed.ckpt").exists())

    def test_idx_labels_beyond_classes_exit_with_data_code(self):
        images = write_idx(self.root / "images.idx", np.zeros((6, 8, 8), dtype=np.uint8))
        labels = write_idx(self.root / "labels.idx", np.array([0, 1, 2, 3, 4, 5], dtype=np.uint8))
        config = self.root / "idx.ini"
        config.write_text(TINY_RUN_INI.replace(
            "[data]\n", f"[data]\nsource = idx\nimages_path = {images}\nlabels_path = {labels}\n"))
        with self.assertRaises(CommandError) as ctx:
            call_command("train", "--config", str(config), "--out", str(self.root), "--case", "transformed",
                         "--no-progress", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 3)

    def test_compare_command(self):
        out = StringIO()
        call_command("compare", "--config", str(self.config), "--out", str(self.root),
                     "--cases", "vanilla", "ema", stdout=out)
        self.assertIn("Compared 2 cases", out.getvalue())


class CalibrationTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_committed_fixture_keeps_the_collapse_setting(self):
        calibration = load_calibration()
        self.assertEqual(calibration.model.latent_dim, 8)
        self.assertEqual(calibration.model.class_count, 10)
        self.assertEqual((calibration.steps, calibration.batch_size), (2000, 64))
        self.assertLessEqual(calibration.budget_seconds, 1200.0)
        configs = calibration.configs()
        self.assertEqual([c.case_name for c in configs], ["vanilla", "decoupled", "transformed", "ema", "augmented"])
        self.assertEqual(len({c.budget() for c in configs}), 1)

    def test_committed_thresholds_never_looser_than_bounds(self):
        thresholds = load_calibration().thresholds
        for name, bound in ACCEPTANCE_BOUNDS.items():
            if name.endswith("_max"):
                self.assertLessEqual(thresholds[name], bound)
            else:
                self.assertGreaterEqual(thresholds[name], bound)

    def test_derived_thresholds_tighten_toward_observations(self):
        observed = {
            "vanilla_erank": 1.2, "decoupled_erank": 2.5, "transformed_erank": 6.0, "ema_erank": 6.5,
            "augmented_erank": 7.0, "l_rec_reduction": 0.6, "rank_gap_fraction": 1.0, "ema_roughness_ratio": 0.4,
        }
        thresholds = derive_thresholds(observed)
        self.assertAlmostEqual(thresholds["vanilla_erank_max"], 1.5)
        self.assertAlmostEqual(thresholds["transformed_erank_min"], 4.8)
        self.assertAlmostEqual(thresholds["erank_ratio_min"], 4.0)
        self.assertAlmostEqual(thresholds["l_rec_reduction_min"], 0.48)
        self.assertAlmostEqual(thresholds["rank_gap_fraction_min"], 0.95)
        self.assertAlmostEqual(thresholds["ema_roughness_ratio_max"], 0.5)

    def test_weak_observations_fall_back_to_bounds(self):
        observed = {
            "vanilla_erank": 3.0, "decoupled_erank": 3.0, "transformed_erank": 3.5, "ema_erank": 3.5,
            "augmented_erank": 3.5, "l_rec_reduction": 0.1, "rank_gap_fraction": 0.5, "ema_roughness_ratio": 2.0,
        }
        self.assertEqual(derive_thresholds(observed), ACCEPTANCE_BOUNDS)

    def test_written_fixture_loads_back(self):
        path = self.root / "calibration.json"
        observed = {
            "vanilla_erank": 1.2, "decoupled_erank": 2.5, "transformed_erank": 6.0, "ema_erank": 6.5,
            "augmented_erank": 7.0, "l_rec_reduction": 0.6, "rank_gap_fraction": 1.0, "ema_roughness_ratio": 0.4,
        }
        write_calibration(load_calibration(), observed, path)
        loaded = load_calibration(path)
        self.assertEqual(loaded.observed, observed)
        self.assertEqual(loaded.thresholds, derive_thresholds(observed))
        self.assertEqual(loaded.model, load_calibration().model)

    def test_malformed_fixture_rejected(self):
        path = self.root / "calibration.json"
        path.write_text('{"steps": 10}')
        with self.assertRaisesRegex(ExperimentError, "malformed"):
            load_calibration(path)
        path.write_text("{")
        with self.assertRaisesRegex(ExperimentError, "not JSON"):
            load_calibration(path)


@unittest.skipUnless(RUN_SLOW, "set DSD_RUN_SLOW=1 for the desk-scale phenomenology runs")
class CollapsePhenomenologyTests(SimpleTestCase):
    """Five cases at the committed calibration: 2000 steps, d = 8, batch 64, synthetic 10-class data"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.calibration = load_calibration()
        cls.thresholds = cls.calibration.thresholds
        cls.table, cls.frames, cls.observed, cls.elapsed = run_calibration(cls.calibration, cls.tmp.name)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_fits_the_runtime_budget(self):
        self.assertLessEqual(self.elapsed, self.calibration.budget_seconds)

    def test_vanilla_collapses(self):
        self.assertLess(self.observed["vanilla_erank"], self.thresholds["vanilla_erank_max"])

    def test_transformed_keeps_rank_and_reconstructs(self):
        self.assertGreater(self.observed["transformed_erank"], self.thresholds["transformed_erank_min"])
        self.assertGreaterEqual(self.observed["l_rec_reduction"], self.thresholds["l_rec_reduction_min"])
        ratio = self.observed["transformed_erank"] / self.observed["vanilla_erank"]
        self.assertGreaterEqual(ratio, self.thresholds["erank_ratio_min"])

    def test_collapse_ordering(self):
        self.assertLess(self.observed["vanilla_erank"], self.observed["decoupled_erank"])
        self.assertLess(self.observed["decoupled_erank"], self.observed["transformed_erank"])

    def test_augmented_rank_gap(self):
        self.assertGreaterEqual(self.observed["rank_gap_fraction"], self.thresholds["rank_gap_fraction_min"])

    def test_ema_smoother_than_transformed(self):
        self.assertLess(self.observed["ema_roughness_ratio"], self.thresholds["ema_roughness_ratio_max"])

    def test_reproduces_committed_observations(self):
        if self.calibration.observed is None:
            self.skipTest("no observations committed; run 'manage.py calibrate'")
        for name, value in self.calibration.observed.items():
            self.assertAlmostEqual(self.observed[name], value, delta=1e-6 * max(1.0, abs(value)), msg=name)


@unittest.skipUnless(RUN_SLOW, "set DSD_RUN_SLOW=1 for the end-to-end run")
class EndToEndTests(SimpleTestCase):
    def test_full_run_classifies_and_samples_by_class(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = ExperimentConfig(steps=3000, wall_clock=False)
            summary = run_case(config, tmp)
            self.assertTrue(np.all(np.isfinite(metrics_frame(summary.metrics_path).to_numpy())))
            self.assertGreater(summary.heldout_accuracy, 0.8)

            state = init_state(config)
            state.load_state_arrays(read_checkpoint(summary.checkpoint_path))
            means = load_dataset(config).class_means()
            for label in range(config.model.class_count):
                result = euler_sample(state.model, SampleConfig(label=label, batch=16, seed=label))
                sample_mean = result.images.mean(axis=0)
                distances = [np.linalg.norm(sample_mean - m) for m in means]
                self.assertEqual(int(np.argmin(distances)), label)
