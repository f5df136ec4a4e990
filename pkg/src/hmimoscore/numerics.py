"""Dense linear-algebra helpers shared by the rest of the package.

Everything here works on real symmetric matrices; complex covariances are
handled through their 2N x 2N real representation.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg


class NumericsError(ValueError):
    """Raised when a matrix violates the structure an operation needs."""


@dataclass(frozen=True)
class EigenPairs:
    """Eigenvalues in descending order and matching orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream)``.

    Each call to :meth:`generator` returns a fresh Philox generator positioned
    at the start of the stream, so a stream can be handed to a worker and
    replayed without sharing mutable state.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RngStream":
        # Mix the child index into the stream id; stays within 64 bits.
        mixed = (self.stream * 0x9E3779B97F4A7C15 + index + 1) % (1 << 64)
        return RngStream(self.seed, mixed)


def symmetrize(m: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NumericsError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if not np.allclose(m, m.T, rtol=0.0, atol=atol * scale):
        raise NumericsError(f"matrix of dimension {m.shape[0]} is not symmetric")
    return 0.5 * (m + m.T)


def eigh(m: np.ndarray) -> EigenPairs:
    """Symmetric eigendecomposition with eigenvalues sorted descending.

    Backed by LAPACK ``syevd``. A LAPACK convergence failure is re-raised as
    :class:`NumericsError` naming the matrix dimension.
    """
    m = symmetrize(m)
    try:
        w, v = linalg.eigh(m, driver="evd")
    except linalg.LinAlgError as exc:
        raise NumericsError(
            f"eigendecomposition did not converge for a {m.shape[0]}x{m.shape[0]} matrix"
        ) from exc
    order = np.argsort(w)[::-1]
    return EigenPairs(w[order], v[:, order])


def psd_factor(cov: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Return ``A`` with ``A @ A.T == cov`` for a PSD, possibly singular ``cov``.

    Eigenvalues down to ``-tol * max|lambda|`` are clamped to zero; anything
    more negative is treated as a modelling error. Positive eigenvalues below
    the same tolerance are round-off and are zeroed too, so draws from a
    rank-deficient covariance stay inside its range.
    """
    pairs = eigh(cov)
    if pairs.values.size == 0:
        return np.zeros((0, 0))
    top = float(np.max(np.abs(pairs.values)))
    if top > 0 and pairs.values[-1] < -tol * top:
        raise NumericsError(
            f"covariance is not PSD: smallest eigenvalue {pairs.values[-1]:.3e} "
            f"against largest magnitude {top:.3e}"
        )
    vals = np.where(pairs.values > tol * top, pairs.values, 0.0)
    return pairs.vectors * np.sqrt(vals)


def sample_gaussian(cov: np.ndarray, rng: RngStream, count: int | None = None) -> np.ndarray:
    """Draw from N(0, cov) as ``U diag(sqrt(lambda)) z``.

    Returns a single vector when ``count`` is None, otherwise a
    ``(count, dim)`` array whose rows are independent draws.
    """
    factor = psd_factor(cov)
    gen = rng.generator()
    dim = factor.shape[0]
    if count is None:
        return factor @ gen.standard_normal(dim)
    z = gen.standard_normal((count, dim))
    return z @ factor.T


def solve_spd(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``m x = rhs`` by Cholesky; ``rhs`` may be a vector or a matrix of columns."""
    m = symmetrize(m, atol=1e-10)
    try:
        factor = linalg.cho_factor(m, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise NumericsError(
            f"matrix of dimension {m.shape[0]} is not symmetric positive definite"
        ) from exc
    diag = np.diag(factor[0])
    if np.min(diag) ** 2 <= 1e-14 * float(np.max(diag)) ** 2:
        raise NumericsError(f"matrix of dimension {m.shape[0]} is numerically singular")
    return linalg.cho_solve(factor, rhs)
