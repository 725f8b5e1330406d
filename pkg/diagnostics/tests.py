import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .spectrum import (
    SpectrumError,
    batch_latent_matrix,
    effective_rank,
    jacobi_eigenvalues,
    rank_gap,
    singular_values,
    spectrum_report,
)


def _gram_oracle(m):
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    return np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(gram))[::-1], 0.0, None))


class SingularValueTests(SimpleTestCase):
    def test_identity(self):
        np.testing.assert_allclose(singular_values(np.eye(4)), np.ones(4), atol=1e-12)

    def test_diagonal(self):
        np.testing.assert_allclose(singular_values(np.diag([1.0, 3.0])), [3.0, 1.0], atol=1e-12)

    def test_wide_matrix_uses_smaller_gram(self):
        m = np.random.default_rng(0).normal(size=(3, 20))
        self.assertEqual(singular_values(m).shape, (3,))

    def test_against_gram_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            m = rng.normal(size=(50, 8))
            np.testing.assert_allclose(singular_values(m), _gram_oracle(m), atol=1e-8)

    def test_jacobi_matches_eigvalsh(self):
        a = np.random.default_rng(5).normal(size=(6, 6))
        sym = a + a.T
        np.testing.assert_allclose(
            jacobi_eigenvalues(sym), np.sort(np.linalg.eigvalsh(sym))[::-1], atol=1e-10
        )

    def test_non_finite_rejected(self):
        with self.assertRaises(SpectrumError):
            singular_values(np.array([[1.0, np.nan], [0.0, 1.0]]))


class EffectiveRankTests(SimpleTestCase):
    def test_identity(self):
        self.assertAlmostEqual(effective_rank(np.eye(4)), 4.0, delta=1e-9)

    def test_rank_one(self):
        u = np.arange(1.0, 6.0)[:, None]
        v = np.array([[2.0, -1.0, 0.5]])
        self.assertAlmostEqual(effective_rank(u @ v), 1.0, delta=1e-9)

    def test_two_value_spectrum(self):
        self.assertAlmostEqual(effective_rank(np.diag([3.0, 1.0])), 1.754765, delta=1e-6)

    def test_zero_matrix_rejected(self):
        with self.assertRaisesRegex(SpectrumError, "zero matrix"):
            effective_rank(np.zeros((3, 3)))

    def test_scale_and_permutation_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            m = rng.normal(size=(12, 5))
            base = effective_rank(m)
            self.assertAlmostEqual(effective_rank(-3.7 * m), base, delta=1e-9)
            self.assertAlmostEqual(effective_rank(m[rng.permutation(12)]), base, delta=1e-9)

    def test_maximal_only_for_equal_spectrum(self):
        self.assertAlmostEqual(effective_rank(np.diag([2.0, 2.0, 2.0])), 3.0, delta=1e-9)
        self.assertLess(effective_rank(np.diag([2.0, 2.0, 1.9])), 3.0)

    def test_bounds(self):
        m = np.random.default_rng(1).normal(size=(30, 6))
        report = spectrum_report(m)
        self.assertGreaterEqual(report.erank, 1.0)
        self.assertLessEqual(report.erank, 6.0)
        self.assertTrue(np.all(np.diff(report.singular_values) <= 0))
        self.assertEqual(report.retained, 6)


class LatentMatrixTests(SimpleTestCase):
    def test_flatten_shape_and_values(self):
        z = np.arange(24.0).reshape(2, 3, 4)
        m = batch_latent_matrix(z)
        self.assertEqual(m.shape, (6, 4))
        np.testing.assert_array_equal(m[4], z[1, 1])
        self.assertLessEqual(effective_rank(m), 4.0)

    def test_rank_gap(self):
        rank_one = np.outer([1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 1.0, 0.0])
        self.assertAlmostEqual(rank_gap(np.eye(4), rank_one), 3.0, delta=1e-9)
        self.assertEqual(rank_gap(np.eye(4), np.eye(4)), 0.0)

    def test_single_row_rejected(self):
        with self.assertRaises(SpectrumError):
            batch_latent_matrix(np.ones((1, 1, 4)))


class DiagnoseCommandTests(SimpleTestCase):
    def test_reports_erank(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "z.npy"
            np.save(path, np.eye(4)[None])
            out = StringIO()
            call_command("diagnose", str(path), stdout=out)
        self.assertIn("erank: 4.000000", out.getvalue())

    def test_missing_file_is_data_error(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("diagnose", "/nonexistent/z.npy", stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 3)
