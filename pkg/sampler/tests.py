import tempfile
from io import StringIO
from pathlib import Path
from types import SimpleNamespace
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from integration.checkpoint import write_checkpoint
from integration.images import read_pgm
from network.backbone import UnifiedBackbone
from network.config import ModelConfig
from objectives.flow import clean_from_velocity

from .euler import (
    SampleConfig,
    SamplerError,
    build_velocity_fn,
    cfg_velocity,
    euler_integrate,
    euler_sample,
    head_velocity,
    time_grid,
)


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        image_size=8, channels=1, patch_size=4, trunk_layers=1, hidden_dim=8, attention_heads=2,
        latent_dim=4, register_count=2, class_count=3, time_embed_dim=8, mlp_ratio=2,
        teacher_dim=4, init_std=0.3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize_modulation(model, rng, scale=0.2):
    for name, param in model.params.items():
        if ".ada." in name:
            param.assign(rng.normal(scale=scale, size=param.shape))


def two_point_velocity(c):
    """Exact velocity of the flow onto the data {−c, +c}"""
    def velocity(z, t):
        mean = c * np.tanh(t * c * z / (1.0 - t) ** 2)
        return (mean - z) / (1.0 - t)
    return velocity


class TiedHeadsModel:
    """Clean head defined from the velocity head, so both sources describe one field"""

    def __init__(self, config):
        self.config = config
        self.params = {}

    @staticmethod
    def field(z, t):
        return np.sin(z) + t - 0.5 * z

    def diffuse_forward(self, z_t, t, labels):
        return SimpleNamespace(z_t=z_t.data, t=t)

    def predict_velocity(self, trunk):
        return SimpleNamespace(data=self.field(trunk.z_t, trunk.t))

    def predict_clean(self, trunk):
        return clean_from_velocity(self.field(trunk.z_t, trunk.t), trunk.z_t, trunk.t)


class SampleConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = SampleConfig()
        self.assertEqual(config.steps, 64)
        self.assertEqual(config.source, "velocity")
        self.assertFalse(config.guided)

    def test_invalid_values_rejected(self):
        with self.assertRaises(SamplerError):
            SampleConfig(steps=0)
        with self.assertRaises(SamplerError):
            SampleConfig(guidance_scale=-0.5)
        with self.assertRaises(SamplerError):
            SampleConfig(source="score")

    def test_guided_needs_label_and_scale(self):
        self.assertTrue(SampleConfig(label=1, guidance_scale=3.0).guided)
        self.assertFalse(SampleConfig(label=1, guidance_scale=1.0).guided)
        self.assertFalse(SampleConfig(label=None, guidance_scale=3.0).guided)


class TimeGridTests(SimpleTestCase):
    def test_four_steps(self):
        np.testing.assert_array_equal(time_grid(4), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_single_step(self):
        np.testing.assert_array_equal(time_grid(1), [0.0, 1.0])

    def test_zero_rejected(self):
        with self.assertRaises(SamplerError):
            time_grid(0)


class GuidanceTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.v_cond = rng.normal(size=(2, 4, 3))
        self.v_uncond = rng.normal(size=(2, 4, 3))

    def test_scale_one_is_conditional(self):
        np.testing.assert_array_equal(cfg_velocity(self.v_cond, self.v_uncond, 1.0), self.v_cond)

    def test_scale_zero_is_unconditional(self):
        np.testing.assert_array_equal(cfg_velocity(self.v_cond, self.v_uncond, 0.0), self.v_uncond)

    def test_extrapolation(self):
        np.testing.assert_allclose(cfg_velocity([1.0], [0.0], 3.0), [3.0])
        np.testing.assert_allclose(cfg_velocity([2.0], [1.0], 0.5), [1.5])

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(SamplerError):
            cfg_velocity(np.zeros(3), np.zeros(4), 2.0)


class EulerIntegrationTests(SimpleTestCase):
    def test_one_point_oracle_lands_exactly(self):
        c = np.array([0.7, -1.3, 2.0])
        z0 = np.random.default_rng(4).normal(size=3)
        for steps in (1, 2, 7, 64, 250):
            z = euler_integrate(lambda z, t: (c - z) / (1.0 - t), z0, steps)
            self.assertLess(np.max(np.abs(z - c)), 1e-12, msg=f"N={steps}")

    def test_constant_field_integrates_exactly(self):
        eps = np.random.default_rng(5).normal(size=(2, 3))
        w = np.array([0.25, -0.5, 1.0])
        for steps in (1, 3, 16):
            z = euler_integrate(lambda z, t: np.broadcast_to(w, z.shape), eps, steps)
            np.testing.assert_allclose(z, eps + w, atol=1e-12)

    def test_trajectory_kept(self):
        z, trajectory = euler_integrate(lambda z, t: np.ones_like(z), np.zeros(2), 4, keep_trajectory=True)
        self.assertEqual(len(trajectory), 5)
        np.testing.assert_array_equal(trajectory[0], np.zeros(2))
        np.testing.assert_array_equal(trajectory[-1], z)

    def test_refinement_on_two_point_data(self):
        c = 0.1
        z0 = np.random.default_rng(6).normal(size=512)
        target = np.sign(z0) * c
        errors = []
        for steps in (8, 16, 32, 64, 128, 256):
            z = euler_integrate(two_point_velocity(c), z0, steps)
            errors.append(float(np.mean(np.abs(z - target))))
        for coarse, fine in zip(errors, errors[1:]):
            self.assertLessEqual(fine, coarse + 1e-15)
        self.assertGreater(errors[0], errors[-1])

    def test_non_finite_velocity_rejected(self):
        with self.assertRaises(SamplerError):
            euler_integrate(lambda z, t: np.full_like(z, np.inf), np.zeros(2), 3)


class VelocitySourceTests(SimpleTestCase):
    def test_tied_heads_sources_agree(self):
        model = TiedHeadsModel(tiny_config())
        z0 = np.random.default_rng(7).normal(size=(2, 4, 4))
        labels = np.zeros(2, dtype=np.int64)
        runs = {}
        for source in ("velocity", "clean"):
            config = SampleConfig(steps=32, source=source)
            runs[source] = euler_integrate(build_velocity_fn(model, config, labels), z0, config.steps)
        self.assertLess(np.max(np.abs(runs["velocity"] - runs["clean"])), 1e-10)

    def test_guidance_scale_one_is_bitwise_conditional(self):
        model = UnifiedBackbone(tiny_config(), seed=2)
        randomize_modulation(model, np.random.default_rng(2))
        guided = euler_sample(model, SampleConfig(steps=4, batch=2, label=1, guidance_scale=1.0), decode=False)

        labels = np.full(2, 1, dtype=np.int64)
        z0 = np.random.default_rng(0).standard_normal((2, model.config.token_count, model.config.latent_dim))
        conditional = euler_integrate(lambda z, t: head_velocity(model, z, t, labels, "velocity"), z0, 4)
        np.testing.assert_array_equal(guided.latents, conditional)

    def test_unconditional_branch_uses_null_label(self):
        model = UnifiedBackbone(tiny_config(), seed=2)
        seen = []
        real = model.diffuse_forward

        def spy(z_t, t, labels):
            seen.append(np.asarray(labels).tolist())
            return real(z_t, t, labels)

        with mock.patch.object(model, "diffuse_forward", side_effect=spy):
            euler_sample(model, SampleConfig(steps=2, batch=2, label=0, guidance_scale=4.0), decode=False)
        self.assertIn([0, 0], seen)
        self.assertIn([model.config.null_label] * 2, seen)


class EulerSampleTests(SimpleTestCase):
    def setUp(self):
        self.model = UnifiedBackbone(tiny_config(), seed=1)

    def test_shapes_and_decoded_range(self):
        result = euler_sample(self.model, SampleConfig(steps=3, batch=2, label=2))
        self.assertEqual(result.latents.shape, (2, 4, 4))
        self.assertEqual(result.images.shape, (2, 1, 8, 8))
        np.testing.assert_array_equal(result.labels, [2, 2])

    def test_fixed_seed_is_deterministic(self):
        config = SampleConfig(steps=3, batch=2, seed=11)
        first = euler_sample(self.model, config)
        second = euler_sample(self.model, config)
        np.testing.assert_array_equal(first.latents, second.latents)
        np.testing.assert_array_equal(first.images, second.images)

    def test_unconditional_uses_null_label(self):
        result = euler_sample(self.model, SampleConfig(steps=1, batch=3), decode=False)
        np.testing.assert_array_equal(result.labels, [3, 3, 3])
        self.assertIsNone(result.images)

    def test_nan_parameters_rejected(self):
        name = next(iter(self.model.params))
        broken = self.model.params[name].data.copy()
        broken.flat[0] = np.nan
        self.model.params[name].assign(broken)
        with self.assertRaises(SamplerError):
            euler_sample(self.model, SampleConfig(steps=2, batch=1))

    def test_label_out_of_range_rejected(self):
        with self.assertRaises(SamplerError):
            euler_sample(self.model, SampleConfig(steps=2, batch=1, label=3))


TINY_MODEL_INI = """
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
"""


class SampleCommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config_path = self.root / "run.ini"
        self.config_path.write_text(TINY_MODEL_INI)
        model = UnifiedBackbone(tiny_config(init_std=0.02), seed=0)
        self.checkpoint = write_checkpoint(
            self.root / "full.ckpt",
            {f"model/{name}": array for name, array in model.state_arrays().items()},
        )

    def tearDown(self):
        self.tmp.cleanup()

    def test_writes_pgm_samples(self):
        out = StringIO()
        call_command("sample", "--checkpoint", str(self.checkpoint), "--config", str(self.config_path),
                     "--out", str(self.root), "--batch", "3", "--steps", "2", "--label", "1",
                     "--dump-latents", str(self.root / "latents.npy"), stdout=out)
        files = sorted((self.root / "samples" / "full").glob("*.pgm"))
        self.assertEqual([f.name for f in files], ["sample_0000.pgm", "sample_0001.pgm", "sample_0002.pgm"])
        self.assertEqual(read_pgm(files[0]).shape, (8, 8))
        self.assertEqual(np.load(self.root / "latents.npy").shape, (3, 4, 4))
        self.assertIn("Wrote 3 samples", out.getvalue())

    def test_negative_guidance_is_config_error(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("sample", "--checkpoint", str(self.checkpoint), "--config", str(self.config_path),
                         "--out", str(self.root), "--guidance", "-1", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_checkpoint_is_data_error(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("sample", "--checkpoint", str(self.root / "absent.ckpt"),
                         "--config", str(self.config_path), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 3)

    def test_zero_steps_is_config_error(self):
        for flag in ("--steps", "--batch"):
            with self.assertRaises(CommandError, msg=flag) as ctx:
                call_command("sample", "--checkpoint", str(self.checkpoint), "--config", str(self.config_path),
                             "--out", str(self.root), flag, "0", stdout=StringIO())
            self.assertEqual(ctx.exception.returncode, 2)
        self.assertFalse((self.root / "samples").exists())
