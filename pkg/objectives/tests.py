import numpy as np
from django.test import SimpleTestCase

from autodiff import functional as F
from autodiff.gradcheck import finite_diff_check
from autodiff.tensor import GradTape, Parameter, backward, constant

from .flow import (
    T_MAX,
    ObjectiveError,
    auxiliary_fit,
    clean_from_velocity,
    equivalence_check,
    interpolate,
    loss_clean,
    loss_detached_velocity,
    loss_velocity,
    loss_velocity_decoupled,
    predictor_output,
    sample_noisy,
    unified_sd_loss,
    velocity_from_clean,
)
from .posterior import bias_variance_check, posterior_moments, variance_suppression_descent

TANH_1 = np.tanh(1.0)


def _grads(loss_fn, params):
    with GradTape() as tape:
        tape.watch(params)
        loss = loss_fn()
    return loss, backward(loss, tape)


class InterpolationTests(SimpleTestCase):
    def test_scalar_arithmetic(self):
        self.assertEqual(interpolate(2.0, 0.5, 0.5).item(), 1.25)

    def test_endpoints(self):
        z, eps = constant([1.0, -2.0]), constant([0.3, 0.7])
        np.testing.assert_array_equal(interpolate(z, eps, 1.0).data, z.data)
        np.testing.assert_array_equal(interpolate(z, eps, 0.0).data, eps.data)

    def test_out_of_range_rejected(self):
        with self.assertRaises(ObjectiveError):
            interpolate(1.0, 0.0, 1.5)

    def test_per_sample_time_broadcasts(self):
        z = constant(np.ones((2, 3, 4)))
        eps = constant(np.zeros((2, 3, 4)))
        z_t = interpolate(z, eps, np.array([0.25, 0.75]))
        np.testing.assert_array_equal(z_t.data[0], np.full((3, 4), 0.25))
        np.testing.assert_array_equal(z_t.data[1], np.full((3, 4), 0.75))

    def test_sample_noisy_invariants(self):
        rng = np.random.default_rng(0)
        sample = sample_noisy(constant(rng.normal(size=(64, 4, 2))), rng)
        self.assertTrue(sample.check())
        self.assertTrue(np.all(sample.t >= 0.0))
        self.assertTrue(np.all(sample.t <= T_MAX))


class LossValueTests(SimpleTestCase):
    def test_velocity_loss(self):
        self.assertEqual(loss_velocity(0.0, 2.0, 0.5).item(), 2.25)
        z, eps = constant([1.0, 2.0]), constant([0.5, -0.5])
        self.assertEqual(loss_velocity(z - eps, z, eps).item(), 0.0)

    def test_decoupled_and_detached_match_joint_forward(self):
        rng = np.random.default_rng(1)
        v, z, eps = (constant(rng.normal(size=(3, 4))) for _ in range(3))
        joint = loss_velocity(v, z, eps).item()
        self.assertEqual(loss_velocity_decoupled(v, z, eps).item(), joint)
        self.assertEqual(loss_detached_velocity(v, z, eps).item(), joint)

    def test_clean_loss_weighting(self):
        self.assertEqual(loss_clean(0.0, 1.0, 0.5, weighted=True).item(), 4.0)
        self.assertEqual(loss_clean(0.0, 1.0, 0.5, weighted=False).item(), 1.0)
        self.assertEqual(loss_clean(3.0, 3.0, 0.9, weighted=True).item(), 0.0)

    def test_weighted_clean_loss_rejects_singular_time(self):
        with self.assertRaises(ObjectiveError):
            loss_clean(0.0, 1.0, 1.0, weighted=True)

    def test_unified_form_and_predictor_output(self):
        rng = np.random.default_rng(2)
        v, z, eps = (constant(rng.normal(size=(2, 5))) for _ in range(3))
        p = predictor_output(v, eps, "velocity")
        self.assertAlmostEqual(unified_sd_loss(p, z).item(), loss_velocity(v, z, eps).item(), places=12)
        self.assertIs(predictor_output(z, eps, "clean"), z)
        with self.assertRaises(ObjectiveError):
            predictor_output(v, eps, "score")


class VelocityRecoveryTests(SimpleTestCase):
    def test_recovered_velocity(self):
        z_t = interpolate(2.0, 0.5, 0.5)
        self.assertEqual(velocity_from_clean(2.0, z_t, 0.5).item(), 1.5)
        self.assertEqual(velocity_from_clean(2.0, 0.5, 0.0).item(), 1.5)
        self.assertEqual(velocity_from_clean(z_t, z_t, 0.5).item(), 0.0)

    def test_time_above_cap_rejected(self):
        with self.assertRaises(ObjectiveError):
            velocity_from_clean(1.0, 0.0, 0.9995)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        v, z_t = constant(rng.normal(size=(4, 3))), constant(rng.normal(size=(4, 3)))
        back = velocity_from_clean(clean_from_velocity(v, z_t, 0.3), z_t, 0.3)
        self.assertLess(np.abs(back.data - v.data).max(), 1e-12)

    def test_clean_from_velocity_cases(self):
        z, eps = constant([2.0, -1.0]), constant([0.5, 0.25])
        for t in (0.0, 0.4, 0.9):
            z_t = interpolate(z, eps, t)
            np.testing.assert_allclose(clean_from_velocity(z - eps, z_t, t).data, z.data, atol=1e-14)
            np.testing.assert_array_equal(clean_from_velocity(constant([0.0, 0.0]), z_t, t).data, z_t.data)

    def test_auxiliary_fit_residual(self):
        rng = np.random.default_rng(4)
        v, z, eps = (rng.normal(size=(3,)) for _ in range(3))
        t = 0.6
        z_t = interpolate(z, eps, t)
        f = auxiliary_fit(v, z_t, t)
        np.testing.assert_allclose(f.data - z, (1 - t) * (v - (z - eps)), atol=1e-14)


class EquivalenceTests(SimpleTestCase):
    def test_random_battery(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            v, z, eps = (rng.normal(size=(4,)) for _ in range(3))
            t = rng.uniform(0.0, T_MAX)
            self.assertLess(equivalence_check(v, z, eps, t), 1e-10)

    def test_exact_prediction_and_zero_time(self):
        z, eps = np.array([1.0, 2.0]), np.array([0.1, -0.4])
        self.assertLess(equivalence_check(z - eps, z, eps, 0.5), 1e-24)
        self.assertLess(equivalence_check(np.array([3.0, 1.0]), z, eps, 0.0), 1e-14)


class GradientWiringTests(SimpleTestCase):
    def test_joint_loss_reaches_target(self):
        z = Parameter("z", [1.0, -0.5])
        _, grads = _grads(lambda: loss_velocity(constant([0.2, 0.1]), z, constant([0.3, 0.3])), [z])
        self.assertTrue(np.any(grads["z"] != 0.0))

    def test_decoupled_and_detached_targets_get_zero(self):
        z = Parameter("z", [1.0, -0.5])
        v = Parameter("v", [0.2, 0.1])
        eps = constant([0.3, 0.3])
        for loss_fn in (loss_velocity_decoupled, loss_detached_velocity):
            _, grads = _grads(lambda: loss_fn(v, z, eps), [z, v])
            np.testing.assert_array_equal(grads["z"], np.zeros(2))
            self.assertTrue(np.any(grads["v"] != 0.0))

    def test_decoupled_loss_still_trains_encoder_through_z_t(self):
        rng = np.random.default_rng(6)
        w = Parameter("encoder.w", rng.normal(size=(3, 2)))
        head = constant(rng.normal(size=(2, 2)))
        x = constant(rng.normal(size=(4, 3)))
        eps = constant(rng.normal(size=(4, 2)))

        def loss():
            z = F.matmul(x, w)
            z_t = interpolate(z, eps, 0.4)
            return loss_velocity_decoupled(F.matmul(z_t, head), z, eps)

        _, grads = _grads(loss, [w])
        self.assertTrue(np.any(grads["encoder.w"] != 0.0))
        self.assertLess(finite_diff_check(loss, [w]), 1e-6)


class PosteriorTests(SimpleTestCase):
    def test_single_point(self):
        m = posterior_moments([np.array([1.5, -2.0])], np.array([0.3, 0.1]), 0.7)
        np.testing.assert_array_equal(m.mean, [1.5, -2.0])
        self.assertEqual(m.variance, 0.0)

    def test_two_point_analytic(self):
        m = posterior_moments([-1.0, 1.0], 0.5, 0.5)
        self.assertAlmostEqual(float(m.mean), TANH_1, delta=1e-9)

    def test_uniform_limit(self):
        data = [np.array([0.0, 1.0]), np.array([2.0, 3.0]), np.array([-1.0, 5.0])]
        m = posterior_moments(data, np.array([0.4, -0.2]), 0.0)
        np.testing.assert_allclose(m.mean, np.mean(data, axis=0), atol=1e-12)

    def test_concentration_near_one(self):
        data = [np.array([0.0, 0.0]), np.array([3.0, 0.0]), np.array([0.0, 3.0])]
        t = 0.999
        m = posterior_moments(data, t * data[1], t)
        self.assertGreater(m.weights[1], 1.0 - 1e-12)

    def test_bad_time_rejected(self):
        with self.assertRaises(ObjectiveError):
            posterior_moments([1.0], 0.0, 1.0)


class BiasVarianceTests(SimpleTestCase):
    def test_two_point_at_zero(self):
        fit, variance, total = bias_variance_check(0.0, [-1.0, 1.0], 0.5, 0.5)
        self.assertAlmostEqual(fit, TANH_1 ** 2, delta=1e-9)
        self.assertAlmostEqual(variance, 1.0 - TANH_1 ** 2, delta=1e-9)
        self.assertAlmostEqual(total, 1.0, delta=1e-12)

    def test_mean_has_zero_fit(self):
        m = posterior_moments([-1.0, 1.0], 0.5, 0.5)
        fit, variance, total = bias_variance_check(m.mean, [-1.0, 1.0], 0.5, 0.5)
        self.assertLess(fit, 1e-24)
        self.assertAlmostEqual(total, variance, delta=1e-12)

    def test_random_datasets(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n, d = rng.integers(1, 33), rng.integers(1, 9)
            data = list(rng.normal(size=(n, d)))
            t = rng.uniform(0.0, 0.95)
            z_t = t * data[0] + (1 - t) * rng.normal(size=d)
            fit, variance, total = bias_variance_check(rng.normal(size=d), data, z_t, t)
            self.assertLess(abs(total - (fit + variance)), 1e-10)
            if n == 1:
                self.assertEqual(variance, 0.0)

    def test_with_auxiliary_fit(self):
        rng = np.random.default_rng(8)
        data = list(rng.normal(size=(6, 3)))
        z, eps, t = data[2], rng.normal(size=3), 0.4
        z_t = interpolate(z, eps, t)
        f = auxiliary_fit(rng.normal(size=3), z_t, t)
        fit, variance, total = bias_variance_check(f, data, z_t, t)
        self.assertGreaterEqual(total, variance)


class VarianceSuppressionTests(SimpleTestCase):
    def test_gradient_points_toward_prediction(self):
        c = constant([[1.0, 1.0]])
        z = Parameter("z", [[0.0, 3.0]])
        _, grads = _grads(lambda: F.mse(c, z), [z])
        direction = c.data - z.data
        self.assertLess(float(np.sum(grads["z"] * direction)), 0.0)

    def test_variance_strictly_decreases(self):
        history = variance_suppression_descent(np.array([[-1.0], [1.0]]), np.array([0.2]), lr=0.1, steps=8)
        self.assertEqual(len(history), 9)
        self.assertTrue(all(b < a for a, b in zip(history, history[1:])))
