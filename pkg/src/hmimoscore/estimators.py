"""Channel estimators on real pilots ``y = h + n`` and the NMSE metric.

All estimators accept a single vector or a batch of row vectors.
"""
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, eigh, solve_spd
from .scorenet import ScoreNetwork, score


class EstimatorError(ValueError):
    """Invalid inputs to an estimator or metric."""


@dataclass(frozen=True)
class ChannelEstimate:
    h_hat: np.ndarray
    estimator: str
    inv_rho: float | None = None
    covariance: str | None = None


@dataclass(frozen=True)
class SampleCovariance:
    matrix: np.ndarray
    count: int
    clipped: bool


def estimate_ls(y) -> ChannelEstimate:
    """Least squares under unit pilot gain is the measurement itself."""
    return ChannelEstimate(np.array(y, dtype=np.float64), "ls")


def wiener_matrix(cov: np.ndarray, inv_rho: float) -> np.ndarray:
    """``C (C + inv_rho I)^{-1}`` via a Cholesky solve; symmetric, so also its transpose."""
    if not inv_rho > 0:
        raise EstimatorError(f"inverse SNR must be positive, got {inv_rho}")
    cov = np.asarray(cov, dtype=np.float64)
    try:
        # (C + tI)^{-1} C, transposed, equals C (C + tI)^{-1}.
        return solve_spd(cov + inv_rho * np.eye(len(cov)), cov).T
    except NumericsError as exc:
        raise EstimatorError(f"oracle solve failed: {exc}") from exc


def estimate_oracle_mmse(y, cov: np.ndarray, inv_rho: float, tag: str = "oracle") -> ChannelEstimate:
    """Bayes estimate ``C (C + inv_rho I)^{-1} y`` with known covariance and noise level."""
    y = np.asarray(y, dtype=np.float64)
    if not inv_rho > 0:
        raise EstimatorError(f"inverse SNR must be positive, got {inv_rho}")
    cov = np.asarray(cov, dtype=np.float64)
    try:
        x = solve_spd(cov + inv_rho * np.eye(len(cov)), y.T)
    except NumericsError as exc:
        raise EstimatorError(f"oracle solve failed: {exc}") from exc
    return ChannelEstimate((cov @ x).T, tag, float(inv_rho), tag)


def sample_covariance(pilots: np.ndarray, inv_rho: float) -> SampleCovariance:
    """``(1/L) sum y y^T - inv_rho I`` with negative eigenvalues clipped to zero."""
    pilots = np.atleast_2d(np.asarray(pilots, dtype=np.float64))
    if len(pilots) < 2:
        raise EstimatorError("sample covariance needs at least two pilots")
    raw = pilots.T @ pilots / len(pilots) - inv_rho * np.eye(pilots.shape[1])
    pairs = eigh(raw)
    clipped = bool(np.any(pairs.values < 0))
    vals = np.clip(pairs.values, 0.0, None)
    mat = (pairs.vectors * vals) @ pairs.vectors.T
    return SampleCovariance(0.5 * (mat + mat.T), len(pilots), clipped)


def estimate_sample_mmse(y, pilots: np.ndarray, inv_rho: float) -> ChannelEstimate:
    """Wiener estimate with the clipped sample covariance of ``pilots``."""
    cs = sample_covariance(pilots, inv_rho)
    est = estimate_oracle_mmse(y, cs.matrix, inv_rho, tag="sample")
    return ChannelEstimate(est.h_hat, "sample", float(inv_rho), "sample")


def estimate_score_mmse(y, net, inv_rho: float) -> ChannelEstimate:
    """Tweedie estimate ``y + inv_rho * score(y)``.

    ``net`` is a :class:`ScoreNetwork` or any callable returning the score of
    the pilot density, which allows injecting an exact score.
    """
    y = np.asarray(y, dtype=np.float64)
    s = score(net, y) if isinstance(net, ScoreNetwork) else net(y)
    return ChannelEstimate(y + inv_rho * np.asarray(s, dtype=np.float64), "score", float(inv_rho))


def gaussian_score(cov: np.ndarray, inv_rho: float):
    """Exact score ``-(C + inv_rho I)^{-1} y`` of the Gaussian pilot density."""
    cov = np.asarray(cov, dtype=np.float64)
    m = cov + inv_rho * np.eye(len(cov))

    def fn(y):
        y = np.asarray(y, dtype=np.float64)
        return -solve_spd(m, y.T).T

    return fn


@dataclass(frozen=True)
class Nmse:
    ratio: float
    db: float


def nmse(estimates, truths) -> Nmse:
    """Batch energy ratio ``sum ||h_hat - h||^2 / sum ||h||^2``.

    A perfect estimate reports ``-inf`` dB.
    """
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(truths, dtype=np.float64)
    if est.shape != ref.shape or est.size == 0:
        raise EstimatorError("estimates and truths must be nonempty and matched")
    energy = float(np.sum(ref**2))
    if energy == 0:
        raise EstimatorError("truth has zero energy; NMSE undefined")
    ratio = float(np.sum((est - ref) ** 2)) / energy
    return Nmse(ratio, float(10 * np.log10(ratio)) if ratio > 0 else -np.inf)


def oracle_nmse_analytic(cov: np.ndarray, inv_rho: float) -> float:
    """Expected oracle NMSE ``tr(C - C (C + tI)^{-1} C) / tr(C)``."""
    cov = np.asarray(cov, dtype=np.float64)
    w = wiener_matrix(cov, inv_rho)
    return float(np.trace(cov - w @ cov) / np.trace(cov))
