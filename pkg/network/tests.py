from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from autodiff import functional as F
from autodiff.gradcheck import finite_diff_check
from autodiff.optim import AdamW
from autodiff.tensor import GradTape, backward, constant, stop_gradient
from objectives.flow import interpolate, loss_clean, loss_detached_velocity

from . import layers
from .alignment import FrozenTeacher
from .backbone import UnifiedBackbone, is_encoder_name
from .config import ModelConfig, NetworkError
from .ema import TargetEncoder, ema_momentum, ema_update


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        image_size=8, channels=1, patch_size=4, trunk_layers=1, hidden_dim=8, attention_heads=2,
        latent_dim=4, register_count=2, class_count=3, time_embed_dim=8, mlp_ratio=2,
        teacher_dim=4, init_std=0.3,
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize_modulation(model, rng, scale=0.2):
    """Give the zero-initialized modulation weights some signal."""
    for name, param in model.params.items():
        if ".ada." in name:
            param.assign(rng.normal(scale=scale, size=param.shape))


def _grads(loss_fn, params):
    with GradTape() as tape:
        tape.watch(params)
        loss = loss_fn()
    return loss, backward(loss, tape)


class ModelConfigTests(SimpleTestCase):
    def test_derived_sizes(self):
        c = ModelConfig()
        self.assertEqual(c.token_count, 64)
        self.assertEqual(c.sequence_length, 68)
        self.assertEqual(c.null_label, 10)

    def test_invalid_geometry_rejected(self):
        with self.assertRaises(NetworkError):
            ModelConfig(image_size=30, patch_size=4)
        with self.assertRaises(NetworkError):
            ModelConfig(hidden_dim=30, attention_heads=4)


class EncodeTests(SimpleTestCase):
    def test_desk_scale_shapes_and_register_length(self):
        model = UnifiedBackbone(ModelConfig(trunk_layers=1, hidden_dim=16), seed=0)
        x = np.random.default_rng(0).uniform(size=(1, 1, 32, 32))
        lengths = []
        real_block = layers.transformer_block

        def spy(h, *args, **kwargs):
            lengths.append(h.shape[1])
            return real_block(h, *args, **kwargs)

        with mock.patch("network.layers.transformer_block", side_effect=spy):
            z = model.encode(x)
        self.assertEqual(z.shape, (1, 64, 8))
        self.assertEqual(lengths, [68])

    def test_deterministic(self):
        model = UnifiedBackbone(tiny_config(), seed=3)
        x = np.random.default_rng(1).uniform(size=(2, 1, 8, 8))
        np.testing.assert_array_equal(model.encode(x).data, model.encode(x).data)
        again = UnifiedBackbone(tiny_config(), seed=3)
        np.testing.assert_array_equal(model.encode(x).data, again.encode(x).data)

    def test_wrong_image_shape_rejected(self):
        model = UnifiedBackbone(tiny_config())
        with self.assertRaises(NetworkError):
            model.encode(np.zeros((2, 1, 4, 4)))

    def test_target_matches_online_at_init(self):
        model = UnifiedBackbone(tiny_config(), seed=4)
        target = TargetEncoder.from_model(model)
        x = np.random.default_rng(2).uniform(size=(2, 1, 8, 8))
        z2 = model.encode_target(x, target)
        np.testing.assert_array_equal(z2.data, model.encode(x).data)
        self.assertIsNone(z2.handle)
        self.assertEqual(set(target.params), {n for n in model.params if is_encoder_name(n)})


class DiffuseTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.model = UnifiedBackbone(tiny_config(), seed=5)
        randomize_modulation(self.model, self.rng)
        self.z_t = self.rng.normal(size=(2, 4, 4))

    def test_feature_shape(self):
        trunk = self.model.diffuse_forward(self.z_t, 0.3, 1)
        self.assertEqual(trunk.features.shape, (2, 4, 8))
        self.assertEqual(len(trunk.hidden), 1)

    def test_label_and_time_change_features(self):
        null = self.model.config.null_label
        a = self.model.diffuse_forward(self.z_t, 0.3, null).features.data
        b = self.model.diffuse_forward(self.z_t, 0.3, 0).features.data
        c = self.model.diffuse_forward(self.z_t, 0.0, 0).features.data
        d = self.model.diffuse_forward(self.z_t, 0.5, 0).features.data
        self.assertFalse(np.allclose(a, b))
        self.assertFalse(np.allclose(c, d))

    def test_invalid_label_rejected(self):
        with self.assertRaises(NetworkError):
            self.model.diffuse_forward(self.z_t, 0.3, np.array([0, 4]))
        with self.assertRaises(NetworkError):
            self.model.diffuse_forward(self.z_t, 0.3, np.array([-1, 0]))

    def test_heads_shapes_and_determinism(self):
        trunk = self.model.diffuse_forward(self.z_t, np.array([0.1, 0.7]), np.array([0, 3]))
        zhat = self.model.predict_clean(trunk)
        self.assertEqual(zhat.shape, (2, 4, 4))
        np.testing.assert_array_equal(zhat.data, self.model.predict_clean(trunk).data)
        self.assertEqual(self.model.predict_velocity(trunk).shape, (2, 4, 4))
        self.assertEqual(self.model.decode(trunk).shape, (2, 1, 8, 8))

    def test_modulation_free_pass_matches_encode_block_at_init(self):
        model = UnifiedBackbone(tiny_config(), seed=6)
        h = constant(self.rng.normal(size=(2, 6, 8)))
        cond = constant(self.rng.normal(size=(2, 8)))
        plain = layers.transformer_block(h, model.params, "trunk.0", 2)
        conditioned = layers.transformer_block(h, model.params, "trunk.0", 2, cond=cond)
        np.testing.assert_array_equal(plain.data, conditioned.data)


class StructureTests(SimpleTestCase):
    def test_single_trunk_shared_by_encode_and_diffuse(self):
        model = UnifiedBackbone(tiny_config(), seed=7)
        rng = np.random.default_rng(7)
        with GradTape() as encode_tape:
            model.encode(rng.uniform(size=(1, 1, 8, 8)))
        with GradTape() as diffuse_tape:
            model.diffuse_forward(rng.normal(size=(1, 4, 4)), 0.5, 0)
        # the encode pass is unconditioned, so it never reads the modulation weights
        trunk_names = [n for n in model.params if n.startswith("trunk.") and ".ada." not in n]
        for name in trunk_names:
            self.assertIs(encode_tape.parameters[name], model.params[name])
            self.assertIs(diffuse_tape.parameters[name], model.params[name])

    def test_velocity_head_isolation(self):
        model = UnifiedBackbone(tiny_config(), seed=8)
        rng = np.random.default_rng(8)
        randomize_modulation(model, rng)
        x = rng.uniform(size=(2, 1, 8, 8))
        eps = constant(rng.normal(size=(2, 4, 4)))

        def velo():
            z = model.encode(x)
            z_t = interpolate(z, eps, 0.4)
            trunk = model.diffuse_forward(z_t, 0.4, np.array([0, 1]))
            return loss_detached_velocity(model.predict_velocity(trunk), z, eps)

        _, grads = _grads(velo, model.params)
        for name, grad in grads.items():
            if name.startswith("velocity_head."):
                continue
            self.assertTrue(np.all(grad == 0.0), name)
        self.assertTrue(np.any(grads["velocity_head.out.weight"] != 0.0))

    def test_decode_gradient_reaches_trunk(self):
        model = UnifiedBackbone(tiny_config(), seed=9)
        rng = np.random.default_rng(9)
        x = rng.uniform(size=(2, 1, 8, 8))

        def rec():
            trunk = model.diffuse_forward(stop_gradient(model.encode(x)), 0.9, 3)
            return F.mse(model.decode(trunk), constant(x))

        _, grads = _grads(rec, model.params)
        self.assertTrue(np.any(grads["trunk.0.mlp.fc2.weight"] != 0.0))
        self.assertTrue(np.any(grads["decoder.proj.weight"] != 0.0))

    def test_round_trip_shape(self):
        for overrides in ({}, {"image_size": 12, "patch_size": 4}, {"channels": 3, "register_count": 0}):
            config = tiny_config(**overrides)
            model = UnifiedBackbone(config)
            x = np.zeros((1,) + config.image_shape)
            trunk = model.diffuse_forward(model.encode(x), 0.2, 0)
            self.assertEqual(model.decode(trunk).shape, x.shape)

    def test_patchify_round_trip(self):
        x = constant(np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8))
        tokens = layers.patchify(x, 4)
        self.assertEqual(tokens.shape, (2, 4, 48))
        np.testing.assert_array_equal(layers.unpatchify(tokens, 4, 3, 8).data, x.data)
        np.testing.assert_array_equal(layers.patchify_array(x.data, 4), tokens.data)


class FullModelGradientTests(SimpleTestCase):
    def test_composite_loss_finite_difference(self):
        model = UnifiedBackbone(tiny_config(), seed=10)
        rng = np.random.default_rng(10)
        randomize_modulation(model, rng)
        teacher = FrozenTeacher(model.config)
        x = rng.uniform(size=(2, 1, 8, 8))
        eps = constant(rng.normal(size=(2, 4, 4)))
        t = np.array([0.3, 0.8])
        labels = np.array([0, 3])
        target_features = teacher(x)

        def total():
            encoded = model.encode_pass(x)
            z = encoded.z
            z_t = interpolate(z, eps, t)
            trunk = model.diffuse_forward(z_t, t, labels)
            loss = loss_clean(model.predict_clean(trunk), z, t)
            loss = loss + loss_detached_velocity(model.predict_velocity(trunk), z, eps)
            loss = loss + F.mse(model.decode(trunk), constant(x))
            loss = loss + F.cross_entropy_with_logits(model.classify(z), np.array([0, 2])) * 0.1
            return loss + model.align_features(0, encoded.hidden, target_features) * 0.5

        self.assertLess(finite_diff_check(total, model.params, abs_floor=1e-4), 1e-4)


class HeadTrainingTests(SimpleTestCase):
    def test_zero_classifier_gives_uniform_cross_entropy(self):
        model = UnifiedBackbone(tiny_config(), seed=11)
        model.params["classifier.weight"].assign(np.zeros((4, 3)))
        model.params["classifier.bias"].assign(np.zeros(3))
        logits = model.classify(np.random.default_rng(0).normal(size=(5, 4, 4)))
        self.assertEqual(logits.shape, (5, 3))
        loss = F.cross_entropy_with_logits(logits, np.array([0, 1, 2, 0, 1]))
        self.assertAlmostEqual(loss.item(), np.log(3.0), places=12)

    def test_classifier_separates_two_classes(self):
        model = UnifiedBackbone(tiny_config(class_count=2), seed=12)
        rng = np.random.default_rng(12)
        labels = np.repeat([0, 1], 16)
        z = rng.normal(scale=0.3, size=(32, 4, 4))
        z[:, :, 0] += np.where(labels == 0, -1.0, 1.0)[:, None]
        head = {n: model.params[n] for n in ("classifier.weight", "classifier.bias")}
        opt = AdamW(head, lr=0.05, weight_decay=0.0)
        for _ in range(200):
            _, grads = _grads(lambda: F.cross_entropy_with_logits(model.classify(z), labels), head)
            opt.step(grads)
        accuracy = np.mean(np.argmax(model.classify(z).data, axis=1) == labels)
        self.assertEqual(accuracy, 1.0)

    def test_autoencoder_overfits_one_image(self):
        config = tiny_config(image_size=4, patch_size=4, hidden_dim=16, register_count=0)
        model = UnifiedBackbone(config, seed=13)
        x = np.random.default_rng(13).uniform(size=(1, 1, 4, 4))
        opt = AdamW(model.params, lr=1e-2, weight_decay=0.0)

        def rec():
            trunk = model.diffuse_forward(model.encode(x), 1.0, config.null_label)
            return F.mse(model.decode(trunk), constant(x))

        for _ in range(500):
            loss, grads = _grads(rec, model.params)
            opt.step(grads)
        self.assertLess(rec().item(), 1e-3)


class AlignmentTests(SimpleTestCase):
    def setUp(self):
        self.model = UnifiedBackbone(tiny_config(trunk_layers=2, teacher_dim=8), seed=14)
        self.model.params["align_proj.weight"].assign(np.eye(8))

    def test_identical_and_orthogonal(self):
        e1 = np.zeros((1, 4, 8))
        e1[..., 0] = 1.0
        e2 = np.zeros((1, 4, 8))
        e2[..., 1] = 2.0
        hidden = [constant(e1), constant(e1)]
        self.assertAlmostEqual(self.model.align_features(0, hidden, e1).item(), -1.0, places=12)
        self.assertEqual(self.model.align_features(1, hidden, e2).item(), 0.0)

    def test_dimension_mismatch_and_layer_range(self):
        hidden = [constant(np.ones((1, 4, 8)))] * 2
        with self.assertRaises(NetworkError):
            self.model.align_features(0, hidden, np.ones((1, 4, 5)))
        with self.assertRaises(NetworkError):
            self.model.align_features(2, hidden, np.ones((1, 4, 8)))

    def test_gradient_stops_at_aligned_layer(self):
        rng = np.random.default_rng(15)
        x = rng.uniform(size=(2, 1, 8, 8))
        teacher = FrozenTeacher(tiny_config(trunk_layers=2, teacher_dim=8))(x)

        def align():
            return self.model.align_features(0, self.model.encode_pass(x).hidden, teacher)

        _, grads = _grads(align, self.model.params)
        self.assertTrue(all(np.all(g == 0.0) for n, g in grads.items() if n.startswith("trunk.1.")))
        self.assertTrue(np.all(grads["latent_out.weight"] == 0.0))
        self.assertTrue(np.any(grads["trunk.0.attn.qkv.weight"] != 0.0))
        self.assertTrue(np.any(grads["align_proj.weight"] != 0.0))


class EmaTests(SimpleTestCase):
    def _pair(self, online_value, shadow_value):
        online = {"w": constant(np.full((2, 2), online_value))}
        return online, TargetEncoder({"w": np.full((2, 2), shadow_value)})

    def test_single_update(self):
        online, target = self._pair(1.0, 0.0)
        ema_update(online, target, 0.99)
        np.testing.assert_allclose(target.params["w"].data, 0.01, atol=1e-15)

    def test_zero_decay_copies(self):
        online, target = self._pair(3.0, -1.0)
        ema_update(online, target, 0.0)
        np.testing.assert_array_equal(target.params["w"].data, online["w"].data)

    def test_geometric_convergence(self):
        online, target = self._pair(1.0, 0.0)
        gaps = []
        for _ in range(5):
            ema_update(online, target, 0.9)
            gaps.append(abs(1.0 - target.params["w"].data[0, 0]))
        for a, b in zip(gaps, gaps[1:]):
            self.assertAlmostEqual(b / a, 0.9, places=9)

    def test_invalid_decay_and_shape(self):
        online, target = self._pair(1.0, 0.0)
        with self.assertRaises(NetworkError):
            ema_update(online, target, 1.0)
        with self.assertRaises(NetworkError):
            ema_update({"w": constant(np.ones(3))}, target, 0.5)

    def test_backward_never_touches_shadow(self):
        model = UnifiedBackbone(tiny_config(), seed=16)
        target = TargetEncoder.from_model(model)
        before = {n: t.data.copy() for n, t in target.params.items()}
        x = np.random.default_rng(16).uniform(size=(2, 1, 8, 8))
        with GradTape() as tape:
            loss = F.mse(model.encode(x), model.encode_target(x, target))
        grads = backward(loss, tape)
        self.assertTrue(all(t.handle is None for t in target.params.values()))
        self.assertFalse(any(t is p for t in target.params.values() for p in tape.parameters.values()))
        for name, value in before.items():
            np.testing.assert_array_equal(target.params[name].data, value)
        self.assertLessEqual(set(grads), set(model.encoder_names()))

    def test_momentum_schedules(self):
        self.assertEqual(ema_momentum(10, 100), 0.99)
        self.assertAlmostEqual(ema_momentum(0, 100, "cosine", 0.99, 0.999), 0.99)
        self.assertAlmostEqual(ema_momentum(100, 100, "cosine", 0.99, 0.999), 0.999)
        with self.assertRaises(NetworkError):
            ema_momentum(0, 10, "linear")


class FrozenTeacherTests(SimpleTestCase):
    def test_shape_and_determinism(self):
        config = tiny_config()
        x = np.random.default_rng(17).uniform(size=(3, 1, 8, 8))
        a = FrozenTeacher(config, seed=1).features(x)
        b = FrozenTeacher(config, seed=1).features(x)
        self.assertEqual(a.shape, (3, 4, 4))
        np.testing.assert_array_equal(a, b)
