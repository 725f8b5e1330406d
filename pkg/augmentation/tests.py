import numpy as np
from django.test import SimpleTestCase

from .pipeline import (
    AugmentConfig,
    AugmentationError,
    augment,
    augment_batch,
    gaussian_blur,
    photometric_jitter,
    random_mask,
)


def _masked_patches(original, masked, patch=4, fill=0.0):
    _, h, w = original.shape
    count = 0
    for r in range(0, h, patch):
        for c in range(0, w, patch):
            block = masked[:, r:r + patch, c:c + patch]
            if np.all(block == fill) and not np.all(original[:, r:r + patch, c:c + patch] == fill):
                count += 1
    return count


class MaskTests(SimpleTestCase):
    def setUp(self):
        self.x = np.random.default_rng(0).uniform(0.1, 1.0, size=(1, 32, 32))

    def test_ratio_zero_is_identity(self):
        np.testing.assert_array_equal(random_mask(self.x, 0.0, np.random.default_rng(1)), self.x)

    def test_ratio_one_fills_everything(self):
        out = random_mask(self.x, 1.0, np.random.default_rng(1), fill=0.5)
        self.assertTrue(np.all(out == 0.5))

    def test_three_quarters_of_64_patches(self):
        out = random_mask(self.x, 0.75, np.random.default_rng(2))
        self.assertEqual(_masked_patches(self.x, out), 48)

    def test_input_not_modified(self):
        before = self.x.copy()
        random_mask(self.x, 0.5, np.random.default_rng(3))
        np.testing.assert_array_equal(self.x, before)


class BlurTests(SimpleTestCase):
    def test_sigma_zero_is_identity(self):
        x = np.random.default_rng(4).uniform(size=(1, 8, 8))
        np.testing.assert_array_equal(gaussian_blur(x, 0.0), x)

    def test_constant_image_unchanged(self):
        x = np.full((1, 16, 16), 0.37)
        np.testing.assert_allclose(gaussian_blur(x, 1.2), x, atol=1e-12)

    def test_mean_preserved_for_interior_support(self):
        x = np.zeros((1, 32, 32))
        x[0, 12:20, 12:20] = np.random.default_rng(5).uniform(size=(8, 8))
        out = gaussian_blur(x, 1.0)
        self.assertAlmostEqual(out.mean(), x.mean(), delta=1e-9)
        self.assertGreater(np.abs(out - x).max(), 0.0)

    def test_negative_sigma_rejected(self):
        with self.assertRaises(AugmentationError):
            gaussian_blur(np.zeros((1, 4, 4)), -0.5)


class JitterTests(SimpleTestCase):
    def test_identity_parameters(self):
        x = np.random.default_rng(6).uniform(0.0, 0.9, size=(1, 8, 8))
        np.testing.assert_allclose(photometric_jitter(x, 0.0, 1.0, 2.0), x, atol=1e-15)

    def test_brightness_shift(self):
        out = photometric_jitter(np.full((1, 4, 4), 0.5), brightness_delta=0.1)
        np.testing.assert_allclose(out, 0.6, atol=1e-15)

    def test_solarize_inverts_bright_pixels(self):
        x = np.array([[[0.8, 0.2]]])
        out = photometric_jitter(x, solarize_threshold=0.5)
        np.testing.assert_allclose(out, [[[0.2, 0.2]]], atol=1e-15)

    def test_clamped(self):
        out = photometric_jitter(np.array([[[0.1, 0.9]]]), brightness_delta=0.5, contrast_scale=3.0)
        self.assertTrue(np.all((out >= 0.0) & (out <= 1.0)))


class PipelineTests(SimpleTestCase):
    def setUp(self):
        self.x = np.random.default_rng(7).uniform(0.05, 1.0, size=(1, 32, 32))

    def test_all_probabilities_zero(self):
        out = augment(self.x, AugmentConfig.disabled(), np.random.default_rng(8))
        np.testing.assert_array_equal(out, self.x)

    def test_fixed_seed_bitwise_identical(self):
        config = AugmentConfig(blur_prob=1.0, jitter_prob=1.0, solarize_prob=1.0)
        a = augment(self.x, config, np.random.default_rng(9))
        b = augment(self.x, config, np.random.default_rng(9))
        self.assertEqual(a.tobytes(), b.tobytes())

    def test_mask_probability_one_count(self):
        config = AugmentConfig.disabled(mask_prob=1.0, mask_ratio=0.75)
        out = augment(self.x, config, np.random.default_rng(10))
        self.assertEqual(_masked_patches(self.x, out), 48)

    def test_output_range(self):
        config = AugmentConfig(blur_prob=1.0, jitter_prob=1.0, brightness=(0.5, 0.9), contrast=(2.0, 3.0))
        out = augment(self.x, config, np.random.default_rng(11))
        self.assertTrue(np.all((out >= 0.0) & (out <= 1.0)))

    def test_batch_streams_are_per_element(self):
        batch = np.stack([self.x, self.x])
        out = augment_batch(batch, AugmentConfig(mask_ratio=0.5), step=3, seed=1)
        self.assertFalse(np.array_equal(out[0], out[1]))
        again = augment_batch(batch, AugmentConfig(mask_ratio=0.5), step=3, seed=1)
        np.testing.assert_array_equal(out, again)

    def test_run_seed_selects_the_stream(self):
        batch = np.stack([self.x, self.x, self.x])
        config = AugmentConfig(blur_prob=1.0, jitter_prob=1.0)
        first = augment_batch(batch, config, step=3, seed=0)
        other = augment_batch(batch, config, step=3, seed=1)
        self.assertFalse(np.array_equal(first, other))
        np.testing.assert_array_equal(first, augment_batch(batch, config, step=3, seed=0))

    def test_batch_masks_every_element(self):
        batch = np.stack([self.x] * 5)
        out = augment_batch(batch, AugmentConfig.disabled(mask_prob=1.0, mask_ratio=0.75), step=0, seed=2)
        self.assertEqual([_masked_patches(self.x, view) for view in out], [48] * 5)

    def test_batch_disabled_is_identity(self):
        batch = np.stack([self.x, 0.5 * self.x])
        np.testing.assert_array_equal(augment_batch(batch, AugmentConfig.disabled(), step=1, seed=0), batch)

    def test_batch_needs_four_dimensions(self):
        with self.assertRaises(AugmentationError):
            augment_batch(self.x, AugmentConfig())

    def test_invalid_config(self):
        with self.assertRaises(AugmentationError) as ctx:
            AugmentConfig(blur_prob=1.5)
        self.assertEqual(ctx.exception.field, "blur_prob")
        with self.assertRaises(AugmentationError):
            AugmentConfig(contrast=(1.2, 0.8))
