import numpy as np
from django.test import SimpleTestCase

from . import functional as F
from .gradcheck import GradientCheckError, finite_diff_check
from .optim import AdamW, clip_grad_norm, global_norm
from .tensor import (
    AutodiffError,
    GradTape,
    Parameter,
    ShapeError,
    backward,
    constant,
    stop_gradient,
)


def _grads(loss_fn, params):
    with GradTape() as tape:
        tape.watch(params)
        loss = loss_fn()
    return loss, backward(loss, tape)


class ForwardOpTests(SimpleTestCase):
    def test_gelu_fixed_point(self):
        self.assertEqual(F.gelu(constant(0.0)).item(), 0.0)

    def test_layer_norm_of_constant_vector(self):
        out = F.layer_norm(constant([5.0, 5.0, 5.0]))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_matmul_shape(self):
        out = F.matmul(constant(np.ones((2, 3))), constant(np.ones((3, 4))))
        self.assertEqual(out.shape, (2, 4))

    def test_matmul_shape_mismatch_names_op_and_shapes(self):
        with self.assertRaisesRegex(ShapeError, r"matmul.*\(2, 3\) vs \(4, 4\)|\(2, 3\) vs \(4, 4\).*matmul"):
            F.matmul(constant(np.ones((2, 3))), constant(np.ones((4, 4))))

    def test_unknown_op_rejected(self):
        with self.assertRaises(AutodiffError):
            F.apply("fft", constant(1.0))

    def test_softmax_rows_sum_to_one(self):
        out = F.softmax(constant(np.arange(12.0).reshape(3, 4)))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(3), atol=1e-15)

    def test_cross_entropy_uniform_logits(self):
        loss = F.cross_entropy_with_logits(constant(np.zeros((5, 10))), np.arange(5))
        self.assertAlmostEqual(loss.item(), np.log(10.0), places=12)

    def test_cosine_similarity_identical_and_orthogonal(self):
        a = constant([[1.0, 2.0, 3.0]])
        self.assertAlmostEqual(F.cosine_similarity(a, a).item(), 1.0, places=12)
        self.assertEqual(
            F.cosine_similarity(constant([[1.0, 0.0]]), constant([[0.0, 2.0]])).item(), 0.0
        )

    def test_sinusoidal_embed_distinguishes_times(self):
        emb = F.sinusoidal_time_embed(constant([0.0, 0.5]), dim=8)
        self.assertEqual(emb.shape, (2, 8))
        self.assertFalse(np.allclose(emb.data[0], emb.data[1]))

    def test_results_are_immutable(self):
        out = F.add(constant([1.0]), constant([2.0]))
        with self.assertRaises(ValueError):
            out.data[0] = 5.0


class BackwardTests(SimpleTestCase):
    def test_square(self):
        x = Parameter("x", 3.0)
        _, grads = _grads(lambda: x * x, [x])
        self.assertEqual(grads["x"], 6.0)

    def test_stop_gradient_factor_is_constant(self):
        x = Parameter("x", [1.0, 2.0])
        _, grads = _grads(lambda: F.sum(stop_gradient(x) * x), [x])
        np.testing.assert_array_equal(grads["x"], [1.0, 2.0])

    def test_stop_gradient_forward_identity(self):
        x = constant([1.0, 2.0, 3.0])
        sg = stop_gradient(x)
        np.testing.assert_array_equal(sg.data, [1.0, 2.0, 3.0])
        self.assertIsNone(sg.handle)

    def test_stop_gradient_annihilates(self):
        x = Parameter("x", 0.0)
        y = Parameter("y", 1.0)
        c = constant(4.0)

        _, grads = _grads(lambda: F.squared_error(stop_gradient(x), c), [x])
        self.assertEqual(grads["x"], 0.0)

        _, grads = _grads(lambda: F.squared_error(y, stop_gradient(x)), [x, y])
        self.assertEqual(grads["x"], 0.0)
        self.assertEqual(grads["y"], 2.0)

    def test_multiple_consumers_accumulate(self):
        x = Parameter("x", 2.0)
        _, grads = _grads(lambda: x * x + x * 3.0, [x])
        self.assertEqual(grads["x"], 7.0)

    def test_unreachable_parameter_maps_to_zero(self):
        x = Parameter("x", [1.0, 2.0])
        unused = Parameter("unused", np.ones((2, 2)))
        _, grads = _grads(lambda: F.sum(x), [x, unused])
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        x = Parameter("x", [1.0, 2.0])
        with GradTape() as tape:
            y = x * 2.0
        with self.assertRaises(AutodiffError):
            backward(y, tape)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = Parameter("x", rng.normal(size=(3, 4)))
        w = constant(rng.normal(size=(4, 2)))

        def l1():
            return F.mean(F.gelu(F.matmul(x, w)))

        def l2():
            return F.sum(F.squared_error(x, constant(np.ones((3, 4)))))

        _, g1 = _grads(l1, [x])
        _, g2 = _grads(l2, [x])
        _, g12 = _grads(lambda: l1() * 2.5 + l2() * -0.5, [x])
        np.testing.assert_allclose(g12["x"], 2.5 * g1["x"] - 0.5 * g2["x"], atol=1e-13)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            x = Parameter("x", rng.normal(size=(3, 4)))
            loss, grads = _grads(lambda: F.mean(F.softmax(F.gelu(x)) * x), [x])
            return loss.data.tobytes(), grads["x"].tobytes()

        self.assertEqual(run(), run())


class FiniteDifferenceTests(SimpleTestCase):
    """Every op of the op set against central differences on 3x4 inputs"""

    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def _param(self, name, shape, low=0.2, high=1.5):
        return Parameter(name, self.rng.uniform(low, high, size=shape))

    def _mix(self, shape):
        return constant(self.rng.uniform(0.5, 1.5, size=shape))

    def _assert_ok(self, f, params, tol=1e-6):
        self.assertLess(finite_diff_check(f, params), tol)

    def test_matmul(self):
        a, b = self._param("a", (3, 4)), self._param("b", (4, 2))
        mix = self._mix((3, 2))
        self._assert_ok(lambda: F.sum(F.matmul(a, b) * mix), [a, b])

    def test_batched_matmul_with_shared_weight(self):
        a, w = self._param("a", (2, 3, 4)), self._param("w", (4, 3))
        mix = self._mix((2, 3, 3))
        self._assert_ok(lambda: F.sum(F.matmul(a, w) * mix), [a, w])

    def test_add_sub_mul_with_broadcast(self):
        a, b = self._param("a", (3, 4)), self._param("b", (1, 4))
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum((F.mul(a, b) + a - b) * mix), [a, b])

    def test_scalar_mul(self):
        a = self._param("a", (3, 4))
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum(F.scalar_mul(a, -1.7) * mix), [a])

    def test_mean_and_sum_over_axes(self):
        a = self._param("a", (3, 4))
        mix = self._mix((3,))
        self._assert_ok(lambda: F.sum(F.mean(a, axis=1) * mix) + F.sum(a, axis=0).mean(), [a])

    def test_reshape_transpose(self):
        a = self._param("a", (3, 4))
        mix = self._mix((4, 3))
        self._assert_ok(lambda: F.sum(F.transpose(F.reshape(a, (4, 3)), (1, 0)).reshape(4, 3) * mix), [a])

    def test_concat_and_slice(self):
        a, b = self._param("a", (3, 4)), self._param("b", (3, 2))
        mix = self._mix((3, 3))
        self._assert_ok(lambda: F.sum(F.concat([a, b], axis=1)[:, 2:5] * mix), [a, b])

    def test_gelu(self):
        a = self._param("a", (3, 4))
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum(F.gelu(a) * mix), [a])

    def test_layer_norm(self):
        a = self._param("a", (3, 4), low=-1.0, high=2.0)
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum(F.layer_norm(a) * mix), [a])

    def test_softmax(self):
        a = self._param("a", (3, 4))
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum(F.softmax(a) * mix), [a])

    def test_squared_error(self):
        a, b = self._param("a", (3, 4)), self._param("b", (3, 4), low=2.0, high=3.0)
        self._assert_ok(lambda: F.mse(a, b), [a, b])

    def test_cross_entropy(self):
        a = self._param("a", (3, 4))
        self._assert_ok(lambda: F.cross_entropy_with_logits(a, np.array([0, 2, 3])), [a])

    def test_cosine_similarity(self):
        a, b = self._param("a", (3, 4)), self._param("b", (3, 4))
        mix = self._mix((3,))
        self._assert_ok(lambda: F.sum(F.cosine_similarity(a, b) * mix), [a, b])

    def test_embedding_lookup(self):
        table = self._param("table", (3, 4))
        mix = self._mix((4, 4))
        self._assert_ok(lambda: F.sum(F.embedding_lookup(table, np.array([2, 0, 2, 1])) * mix), [table])

    def test_sinusoidal_time_embed(self):
        t = self._param("t", (3,), low=0.1, high=0.9)
        mix = self._mix((3, 4))
        self._assert_ok(lambda: F.sum(F.sinusoidal_time_embed(t, dim=4, scale=1.0) * mix), [t])

    def test_cube_against_analytic(self):
        x = Parameter("x", 2.0)
        self.assertLess(finite_diff_check(lambda: x * x * x, [x], h=1e-5), 1e-8)

    def test_constant_function(self):
        x = Parameter("x", [1.0, -1.0])
        self.assertEqual(finite_diff_check(lambda: constant(3.0), [x]), 0.0)

    def test_non_finite_reported_with_index(self):
        x = Parameter("x", [1.0, 2.0])

        def f():
            value = F.sum(x).item()
            return constant(np.inf if value > 3.0 else value)

        with self.assertRaises(GradientCheckError) as ctx:
            finite_diff_check(f, [x], h=1.5)
        self.assertEqual(ctx.exception.parameter, "x")
        self.assertEqual(ctx.exception.index, (0,))


class OptimizerTests(SimpleTestCase):
    def test_clip_caps_global_norm(self):
        grads = {"a": np.full((2, 2), 3.0), "b": np.array([4.0])}
        clipped, before, after = clip_grad_norm(grads, 3.0)
        self.assertAlmostEqual(before, np.sqrt(36.0 + 16.0))
        self.assertLessEqual(after, 3.0 + 1e-9)
        self.assertAlmostEqual(global_norm(clipped), after)

    def test_clip_leaves_small_gradients(self):
        grads = {"a": np.array([0.1, 0.2])}
        clipped, before, after = clip_grad_norm(grads, 3.0)
        self.assertIs(clipped, grads)
        self.assertEqual(before, after)

    def test_adamw_descends_quadratic(self):
        x = Parameter("x", np.array([[3.0, -2.0]]))
        opt = AdamW({"x": x}, lr=0.05, weight_decay=0.0)
        for _ in range(300):
            _, grads = _grads(lambda: F.sum(F.squared_error(x, constant(np.zeros((1, 2))))), [x])
            opt.step(grads)
        self.assertLess(np.abs(x.data).max(), 0.2)

    def test_state_round_trip(self):
        x = Parameter("x", np.ones((2, 2)))
        opt = AdamW({"x": x})
        opt.step({"x": np.ones((2, 2))})
        restored = AdamW({"x": x})
        restored.load_state_arrays(opt.state_arrays())
        self.assertEqual(restored.t, 1)
        np.testing.assert_array_equal(restored.m["x"], opt.m["x"])
