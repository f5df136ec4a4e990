"""Planar-array geometry, spatial correlation matrices and pilot synthesis.

Positions are expressed in carrier wavelengths, so the array response is
``exp(j 2 pi t^T u)`` without an explicit wavelength factor. Complex channels
are represented by the stacked real vector ``[Re h, Im h]`` of length 2N.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import EigenPairs, NumericsError, RngStream, eigh, psd_factor

ENVIRONMENTS = ("isotropic", "truncated", "custom")


class ChannelError(ValueError):
    """Invalid geometry, density or covariance construction."""


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array indexed row by row.

    Attributes
    ----------
    n_antennas : int
        Total antenna count ``N``; the array is ``sqrt(N) x sqrt(N)``.
    spacing : float
        Element spacing in wavelengths.
    positions : ndarray, shape (N, 3)
        Antenna coordinates in wavelengths, centred on the origin.
    """

    n_antennas: int
    spacing: float
    positions: np.ndarray

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.n_antennas)))


def _grid_positions(side: int, spacing: float) -> np.ndarray:
    idx = np.arange(side * side)
    half = (side - 1) * spacing / 2
    ux = -half + spacing * (idx % side)
    uy = half - spacing * (idx // side)
    return np.stack([ux, uy, np.zeros_like(ux)], axis=1)


def build_geometry(n_antennas: int, spacing: float, min_antennas: int = 4) -> ArrayGeometry:
    """Build a square UPA with ``n_antennas`` elements at ``spacing`` wavelengths.

    ``min_antennas`` may be lowered to 1 to obtain the degenerate
    single-element array used in unit checks.
    """
    side = int(round(np.sqrt(n_antennas)))
    if side * side != n_antennas:
        raise ChannelError(f"antenna count {n_antennas} is not a perfect square")
    if n_antennas < min_antennas:
        raise ChannelError(f"antenna count {n_antennas} is below the minimum {min_antennas}")
    if not spacing > 0:
        raise ChannelError(f"spacing must be positive, got {spacing}")
    return ArrayGeometry(n_antennas, float(spacing), _grid_positions(side, float(spacing)))


def direction(phi, theta) -> np.ndarray:
    """Unit propagation vector ``t(phi, theta)``; broadcasts over inputs."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack(
        [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=-1
    )


def array_response(geom: ArrayGeometry, phi: float, theta: float) -> np.ndarray:
    """Plane-wave phase signature across the array, unit modulus entries."""
    lim = np.pi / 2 + 1e-12
    if abs(phi) > lim or abs(theta) > lim:
        raise ChannelError("angles must lie in [-pi/2, pi/2]")
    return np.exp(2j * np.pi * (geom.positions @ direction(phi, theta)))


def real_representation(r: np.ndarray) -> np.ndarray:
    """Covariance of ``[Re h, Im h]`` for circular ``h ~ CN(0, r)``."""
    re, im = r.real, r.imag
    return 0.5 * np.block([[re, -im], [im, re]])


@dataclass(frozen=True)
class SpatialCovariance:
    """Complex correlation matrix with its real 2N x 2N counterpart.

    ``eigen`` holds the decomposition of ``R`` when it is real, which is the
    case for the isotropic and truncated constructions.
    """

    r: np.ndarray
    environment: str
    beta: float = 1.0
    eigen: EigenPairs | None = None

    @property
    def n_antennas(self) -> int:
        return self.r.shape[0]

    @property
    def real(self) -> np.ndarray:
        return real_representation(self.r)

    def rank(self, rel_tol: float = 1e-6) -> int:
        values = self._values()
        return int(np.sum(values > rel_tol * values[0]))

    def _values(self) -> np.ndarray:
        if self.eigen is not None:
            return self.eigen.values
        return eigh(real_representation(self.r)).values[::2] * 2


def _finish(r: np.ndarray, environment: str, beta: float) -> SpatialCovariance:
    r = 0.5 * (r + r.conj().T)
    eigen = None
    if np.iscomplexobj(r) and np.max(np.abs(r.imag)) <= 1e-12 * max(1.0, np.max(np.abs(r.real))):
        r = r.real
    if not np.iscomplexobj(r):
        eigen = eigh(r)
        top = max(abs(eigen.values[0]), abs(eigen.values[-1]))
        if top > 0 and eigen.values[-1] < -1e-9 * top:
            raise ChannelError("covariance is not PSD")
    return SpatialCovariance(r, environment, float(beta), eigen)


def isotropic_covariance(geom: ArrayGeometry, beta: float = 1.0) -> SpatialCovariance:
    """Closed-form isotropic correlation ``beta * sinc(2 |u_l - u_m|)``."""
    if not beta > 0:
        raise ChannelError(f"beta must be positive, got {beta}")
    diff = geom.positions[:, None, :] - geom.positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    return _finish(beta * np.sinc(2 * dist), "isotropic", beta)


@dataclass(frozen=True)
class ScatteringDensity:
    """Angular power density ``f(phi, theta)`` on ``[-pi/2, pi/2]^2`` with gain ``beta``."""

    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    beta: float = 1.0


def isotropic_density(beta: float = 1.0) -> ScatteringDensity:
    """Density that reproduces the closed-form isotropic covariance.

    Uniform power over the front hemisphere corresponds to ``cos(theta)/(2 pi)``
    once the solid-angle Jacobian is folded in; it integrates to one over the
    square domain.
    """
    return ScatteringDensity(lambda phi, theta: np.cos(theta) / (2 * np.pi) + 0 * phi, beta)


def _midpoint_nodes(nodes: int) -> tuple[np.ndarray, float]:
    step = np.pi / nodes
    return -np.pi / 2 + step * (np.arange(nodes) + 0.5), step


def numerical_covariance(
    geom: ArrayGeometry,
    density: ScatteringDensity,
    nodes: int = 181,
    chunk: int = 4096,
    point_symmetric: bool = False,
) -> SpatialCovariance:
    """Correlation matrix by tensor-product midpoint quadrature of the density.

    Parameters
    ----------
    geom : ArrayGeometry
    density : ScatteringDensity
        Must integrate to one over the angular square.
    nodes : int
        Quadrature nodes per axis.
    chunk : int
        Angular nodes processed per block, bounding memory use.
    point_symmetric : bool
        Also count the mirrored arrival ``-t`` with equal weight. The angular
        square spans the ``x >= 0`` hemisphere while the array lies in the
        ``xy`` plane, so only the symmetric form recovers the closed-form
        sinc covariance from a uniform density.

    Returns
    -------
    SpatialCovariance
        Tagged ``custom``; Hermitian and PSD up to rounding.
    """
    grid, step = _midpoint_nodes(nodes)
    phi, theta = np.meshgrid(grid, grid, indexing="ij")
    phi, theta = phi.ravel(), theta.ravel()
    weight = np.asarray(density.evaluator(phi, theta), dtype=np.float64) * step * step
    if np.any(weight < 0):
        raise ChannelError("scattering density must be nonnegative")
    mass = float(weight.sum())
    if abs(mass - 1.0) > 1e-3:
        raise ChannelError(f"scattering density integrates to {mass:.6f}, expected 1")
    n = geom.n_antennas
    r = np.zeros((n, n), dtype=np.complex128)
    t = direction(phi, theta)
    # R = sum_k w_k a_k a_k^H, accumulated block by block.
    for start in range(0, len(weight), chunk):
        sl = slice(start, start + chunk)
        a = np.exp(2j * np.pi * (geom.positions @ t[sl].T))
        r += (a * weight[sl]) @ a.conj().T
    if point_symmetric:
        r = r.real.astype(np.complex128)
    return _finish(density.beta * r, "custom", density.beta)


def truncated_covariance(
    iso: SpatialCovariance, denominator: int = 8, rank_tol: float = 1e-6
) -> SpatialCovariance:
    """Keep the leading ``ceil(rank / denominator)`` eigenpairs of an isotropic covariance.

    The result is rescaled so its trace stays ``beta * N``.
    """
    if iso.environment != "isotropic" or iso.eigen is None:
        raise ChannelError("truncation expects an isotropic covariance")
    if denominator < 1:
        raise ChannelError(f"denominator must be >= 1, got {denominator}")
    values, vectors = iso.eigen.values, iso.eigen.vectors
    rank = int(np.sum(values > rank_tol * values[0]))
    keep = int(np.ceil(rank / denominator))
    if keep == 0 or values[keep - 1] <= 0:
        raise ChannelError("truncation would keep zero eigenvalues")
    kept = values[:keep] * (iso.beta * iso.n_antennas / values[:keep].sum())
    full = np.zeros_like(values)
    full[:keep] = kept
    r = (vectors[:, :keep] * kept) @ vectors[:, :keep].T
    r = 0.5 * (r + r.T)
    return SpatialCovariance(r, "truncated", iso.beta, EigenPairs(full, vectors))


@dataclass(frozen=True)
class PilotSet:
    """A batch of real pilot observations with optional ground truth.

    Attributes
    ----------
    y : ndarray, shape (M, 2N)
    inv_snr : float
        Noise variance ``1/rho`` per real coordinate.
    environment : str
    h : ndarray or None
        Ground-truth channels, present only in evaluation data.
    """

    y: np.ndarray
    inv_snr: float
    environment: str
    h: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)

    def pilots_only(self) -> "PilotSet":
        return PilotSet(self.y, self.inv_snr, self.environment, None)


def _factor(cov: SpatialCovariance) -> np.ndarray:
    """Return A with A A^T equal to the real covariance, reusing cached eigenpairs."""
    if cov.eigen is None:
        return psd_factor(cov.real)
    vals = cov.eigen.values
    vals = np.where(vals > 1e-9 * np.max(np.abs(vals)), vals, 0.0)
    half = cov.eigen.vectors * np.sqrt(vals / 2)
    zero = np.zeros_like(half)
    return np.block([[half, zero], [zero, half]])


def synthesize_dataset(
    cov: SpatialCovariance,
    inv_snr: float,
    count: int,
    rng: RngStream,
    with_truth: bool = False,
    block: int = 256,
) -> PilotSet:
    """Draw ``count`` pilots ``y = h + n`` with ``h ~ N(0, C)`` and ``n ~ N(0, inv_snr I)``.

    Samples are generated in fixed blocks, each with its own child stream,
    so the output does not depend on how blocks are scheduled.
    """
    if inv_snr < 0:
        raise ChannelError(f"inverse SNR must be nonnegative, got {inv_snr}")
    if count < 1:
        raise ChannelError(f"count must be >= 1, got {count}")
    try:
        factor = _factor(cov)
    except NumericsError as exc:
        raise ChannelError(str(exc)) from exc
    dim = factor.shape[0]
    hs = np.empty((count, dim))
    ys = np.empty((count, dim))
    for b, start in enumerate(range(0, count, block)):
        stop = min(start + block, count)
        gen = rng.child(b).generator()
        z = gen.standard_normal((stop - start, factor.shape[1]))
        noise = gen.standard_normal((stop - start, dim))
        hs[start:stop] = z @ factor.T
        ys[start:stop] = hs[start:stop] + np.sqrt(inv_snr) * noise
    return PilotSet(ys, float(inv_snr), cov.environment, hs if with_truth else None)
