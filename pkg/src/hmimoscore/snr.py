"""Blind noise-level estimation from virtual subarray channels.

A sliding window cuts the arrayed pilot into overlapping subarrays. Because
the spatial channel is low rank, most eigenvalues of the subarray covariance
carry noise only; their mean estimates ``1/rho``.
"""
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import eigh


class SnrError(ValueError):
    """Invalid window configuration or an estimate that cannot be formed."""


@dataclass(frozen=True)
class VscConfig:
    """Square window of side ``window`` over a ``side x side`` array."""

    side: int
    window: int

    def __post_init__(self):
        if self.window < 1 or self.side < 1:
            raise SnrError("array and window sides must be positive")
        if self.window > self.side:
            raise SnrError(f"window {self.window} exceeds array side {self.side}")
        if self.count < 2 * self.dim:
            warnings.warn(
                f"only {self.count} subarrays for dimension {2 * self.dim}; "
                "covariance is poorly conditioned",
                stacklevel=2,
            )

    @classmethod
    def for_antennas(cls, n_antennas: int, window: int) -> "VscConfig":
        side = int(round(np.sqrt(n_antennas)))
        if side * side != n_antennas:
            raise SnrError(f"antenna count {n_antennas} is not a perfect square")
        return cls(side, window)

    @property
    def dim(self) -> int:
        """Antennas per subarray, ``d``."""
        return self.window * self.window

    @property
    def count(self) -> int:
        """Subarrays per pilot, ``s``."""
        return (self.side - self.window + 1) ** 2


@dataclass(frozen=True)
class SnrEstimate:
    inv_rho_hat: float
    redundant: int
    principal: int
    iterations: int
    eigenvalues: np.ndarray


def extract_vscs(y: np.ndarray, cfg: VscConfig) -> np.ndarray:
    """Flattened ``2d``-vectors of every window position, real part first.

    Returns an ``(s, 2d)`` array for one pilot, or ``(B, s, 2d)`` for a batch.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    yb = np.atleast_2d(y)
    if yb.shape[1] != 2 * cfg.side**2:
        raise SnrError(f"expected pilots of length {2 * cfg.side**2}, got {yb.shape[1]}")
    grid = yb.reshape(len(yb), 2, cfg.side, cfg.side)
    win = sliding_window_view(grid, (cfg.window, cfg.window), axis=(2, 3))
    # (B, 2, s_r, s_c, w, w) -> (B, s_r, s_c, 2, w, w)
    win = np.moveaxis(win, 1, 3).reshape(len(yb), cfg.count, 2 * cfg.dim)
    return win[0] if single else win


def vsc_covariance(vscs: np.ndarray) -> np.ndarray:
    """Uncentred second moment ``(1/s) sum_t y_t y_t^T`` of the subarray vectors."""
    z = np.asarray(vscs, dtype=np.float64).reshape(-1, np.shape(vscs)[-1])
    if len(z) < 2:
        raise SnrError("need at least two subarray vectors")
    return z.T @ z / len(z)


def separate_noise(eigenvalues: np.ndarray, samples: int, margin: float = 2.0, max_iter: int = 50):
    """Split descending ``eigenvalues`` into principal and noise parts.

    Starting from all eigenvalues, the noise level ``tau`` is the mean of the
    current noise set. An eigenvalue stays in the set while it lies below the
    Marchenko-Pastur upper edge ``tau (1 + sqrt(m / samples))^2`` for ``m``
    noise dimensions, widened by ``margin`` Tracy-Widom scales to absorb the
    finite-sample spread of the largest noise eigenvalue. Iterates until the
    split is stable.

    Returns
    -------
    tau : float
    redundant : int
    iterations : int
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    p = len(lam)
    m = p
    for it in range(1, max_iter + 1):
        tau = float(lam[p - m :].mean())
        a, b = np.sqrt(samples), np.sqrt(m)
        edge = tau * (1 + b / a) ** 2
        spread = tau * (a + b) * (1 / a + 1 / b) ** (1 / 3) / samples
        new_m = int(np.sum(lam <= edge + margin * spread))
        if new_m == 0:
            raise SnrError("no redundant subspace: every eigenvalue classified principal")
        if new_m == m:
            return tau, m, it
        m = new_m
    return float(lam[p - m :].mean()), m, max_iter


def estimate_inv_snr(y: np.ndarray, cfg: VscConfig, margin: float = 2.0) -> SnrEstimate:
    """Estimate the noise variance ``1/rho`` from one pilot or a pooled batch.

    A batch of pilots sharing one operating point pools all of their
    subarrays into a single covariance, which tightens the estimate.
    """
    z = extract_vscs(y, cfg)
    z = z.reshape(-1, z.shape[-1])
    values = eigh(vsc_covariance(z)).values
    if values[0] <= 0:
        raise SnrError("no redundant subspace: pilot is identically zero")
    tau, m, it = separate_noise(values, len(z), margin)
    if not tau > 0:
        raise SnrError("noise eigenvalues vanished; pilot carries no noise")
    return SnrEstimate(tau, m, len(values) - m, it, values)


def estimate_inv_snr_groups(pilots: np.ndarray, cfg: VscConfig, group: int = 4) -> np.ndarray:
    """One pooled estimate per consecutive group of ``group`` pilots.

    A trailing partial group is pooled as well.
    """
    pilots = np.atleast_2d(pilots)
    return np.array(
        [estimate_inv_snr(pilots[i : i + group], cfg).inv_rho_hat for i in range(0, len(pilots), group)]
    )


def snr_statistics(estimates, truth: float) -> dict:
    """Bias, standard deviation and RMSE of ``1/rho`` estimates.

    ``bias = |truth - mean|``, ``std`` is the population deviation and
    ``rmse = sqrt(mean((truth - est)^2))``, so ``rmse^2 = bias^2 + std^2``.
    """
    e = np.asarray(estimates, dtype=np.float64)
    mean = float(e.mean())
    return {
        "count": int(e.size),
        "mean": mean,
        "bias": abs(truth - mean),
        "std": float(np.sqrt(np.mean((e - mean) ** 2))),
        "rmse": float(np.sqrt(np.mean((truth - e) ** 2))),
    }
