"""
Singular spectra and effective rank of representation batches.

The spectrum comes from the eigenvalues of the smaller Gram matrix
(MᵀM or MMᵀ), diagonalized with cyclic Jacobi rotations. Effective rank
is the exponential of the Shannon entropy of the normalized singular
values.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Relative cutoff below which a singular value counts as zero
NONZERO_THRESHOLD = 1e-12

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


class SpectrumError(Exception):
    """Raised for matrices whose spectrum or effective rank is undefined"""

    def __init__(self, message, shape=None):
        self.message = message
        self.shape = shape

        detail = ""
        if shape is not None:
            detail += f" (matrix shape {tuple(shape)})"

        super().__init__(f"{message}{detail}")


@dataclass(frozen=True)
class SpectrumReport:
    singular_values: np.ndarray
    erank: float
    nonzero_threshold: float
    matrix_shape: Tuple[int, int]

    @property
    def retained(self) -> int:
        """Number of singular values above the relative cutoff"""
        if self.singular_values.size == 0 or self.singular_values[0] == 0.0:
            return 0
        cutoff = self.nonzero_threshold * self.singular_values[0]
        return int(np.count_nonzero(self.singular_values > cutoff))


def _as_matrix(matrix) -> np.ndarray:
    m = np.asarray(getattr(matrix, "data", matrix), dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise SpectrumError("expected a non-empty 2-D matrix", shape=m.shape)
    if not np.all(np.isfinite(m)):
        raise SpectrumError("matrix has non-finite entries", shape=m.shape)
    return m


def jacobi_eigenvalues(sym: np.ndarray, tol: float = JACOBI_TOLERANCE,
                       max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """
    Eigenvalues of a symmetric matrix by cyclic Jacobi rotations

    Sweeps stop once the off-diagonal Frobenius mass drops below
    ``tol`` times the total Frobenius norm.

    Returns:
        Eigenvalues sorted descending.
    """
    a = np.array(sym, dtype=np.float64, copy=True)
    n = a.shape[0]
    total = np.sqrt(np.sum(a * a))
    if n == 1 or total == 0.0:
        return np.sort(np.diag(a))[::-1]

    for sweep in range(max_sweeps):
        off = np.sqrt(np.sum(a * a) - np.sum(np.diag(a) ** 2))
        if off <= tol * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    else:
        logger.warning(f"Jacobi did not converge in {max_sweeps} sweeps (n={n})")

    return np.sort(np.diag(a))[::-1]


def singular_values(matrix) -> np.ndarray:
    """Singular values of ``matrix`` in descending order."""
    m = _as_matrix(matrix)
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    eig = jacobi_eigenvalues(gram)
    # Gram eigenvalues below the rounding floor of the Gram product are zero
    floor = 8 * gram.shape[0] * np.finfo(np.float64).eps * max(eig[0], 0.0)
    eig = np.where(eig > floor, eig, 0.0)
    return np.sqrt(eig)


def _erank_from_values(values: np.ndarray, threshold: float, shape) -> float:
    if values.size == 0 or values[0] <= 0.0:
        raise SpectrumError("erank undefined for the zero matrix", shape=shape)
    kept = values[values > threshold * values[0]]
    p = kept / kept.sum()
    entropy = -np.sum(p * np.log(p))
    return float(np.exp(entropy))


def effective_rank(matrix, threshold: float = NONZERO_THRESHOLD) -> float:
    m = _as_matrix(matrix)
    return _erank_from_values(singular_values(m), threshold, m.shape)


def spectrum_report(matrix, threshold: float = NONZERO_THRESHOLD) -> SpectrumReport:
    m = _as_matrix(matrix)
    values = singular_values(m)
    erank = _erank_from_values(values, threshold, m.shape)
    return SpectrumReport(
        singular_values=values,
        erank=erank,
        nonzero_threshold=threshold,
        matrix_shape=m.shape,
    )


def batch_latent_matrix(latents) -> np.ndarray:
    """Flatten batch×tokens×dim latents into a (batch·tokens)×dim matrix."""
    z = np.asarray(getattr(latents, "data", latents), dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    if z.ndim != 3:
        raise SpectrumError("expected batch×tokens×dim latents", shape=z.shape)
    if z.shape[0] * z.shape[1] < 2:
        raise SpectrumError("need at least two latent rows", shape=z.shape)
    return z.reshape(-1, z.shape[-1])


def rank_gap(target, predicted) -> float:
    """erank(target) − erank(predicted); positive means the target is richer."""
    return effective_rank(target) - effective_rank(predicted)
