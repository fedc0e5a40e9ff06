"""DC weighted least squares state estimation and residual-based bad data detection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .grid import ObservationMatrix


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal measurement covariance, stored as per-measurement variances (p.u.^2)."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        if v.ndim != 1 or np.any(~np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("variances must be a finite positive vector")
        object.__setattr__(self, "variances", v)

    @classmethod
    def uniform(cls, m: int, sigma: float = 0.01) -> NoiseModel:
        return cls(np.full(m, sigma * sigma))

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.variances)

    @property
    def sigma_default(self) -> float:
        return float(np.sqrt(np.mean(self.variances)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (len(self.variances),) if size is None else (size, len(self.variances))
        return rng.standard_normal(shape) * self.sigma


@dataclass(frozen=True)
class EstimationResult:
    x_hat: np.ndarray
    z_hat: np.ndarray
    residual_norm: float  # ||z - H x_hat||
    weighted_residual_norm: float  # ||E^-1/2 (z - H x_hat)||


@dataclass(frozen=True)
class BddThreshold:
    tau1: float
    method: str  # "chi2" or "empirical"
    level: float  # significance (chi2) or quantile alpha (empirical)

    @property
    def weighted(self) -> bool:
        # the chi-square law holds for the noise-whitened residual only
        return self.method == "chi2"


class WlsEstimator:
    """WLS solver with the QR factorisation of E^-1/2 H cached.

    Accepts a single measurement vector or a batch with measurements in rows.
    """

    def __init__(self, obs: ObservationMatrix, noise: NoiseModel):
        if len(noise.variances) != obs.m:
            raise ValueError("noise model size does not match the number of measurements")
        self.obs = obs
        self.noise = noise
        self._w = 1.0 / noise.sigma
        self._q, self._r = linalg.qr(obs.H * self._w[:, None], mode="economic")
        diag = np.abs(np.diag(self._r))
        if diag.min() <= 1e-12 * diag.max():
            raise EstimationError("normal matrix is singular; the measurement set is unobservable")

    def estimate(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        zw = z * self._w
        rhs = zw @ self._q  # batch rows or single vector
        return linalg.solve_triangular(self._r, rhs.T).T

    def residuals(self, z: np.ndarray, weighted: bool = False) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        r = z - self.estimate(z) @ self.obs.H.T
        if weighted:
            r = r * self._w
        return np.linalg.norm(r, axis=-1)

    def result(self, z: np.ndarray) -> EstimationResult:
        x = self.estimate(z)
        z_hat = self.obs.H @ x
        r = z - z_hat
        return EstimationResult(x, z_hat, float(np.linalg.norm(r)), float(np.linalg.norm(r * self._w)))


def wls_estimate(z: np.ndarray, obs: ObservationMatrix, noise: NoiseModel) -> EstimationResult:
    z = np.asarray(z, dtype=float)
    if z.shape != (obs.m,):
        raise ValueError(f"expected a measurement vector of length {obs.m}, got shape {z.shape}")
    return WlsEstimator(obs, noise).result(z)


def residual_for(result: EstimationResult, tau1: BddThreshold) -> float:
    return result.weighted_residual_norm if tau1.weighted else result.residual_norm


def bdd_detect(z: np.ndarray, obs: ObservationMatrix, noise: NoiseModel, tau1: BddThreshold) -> bool:
    """Alarm when the estimation residual reaches the threshold."""
    return residual_for(wls_estimate(z, obs, noise), tau1) >= tau1.tau1


def calibrate_tau1(obs: ObservationMatrix, noise: NoiseModel, method: str = "empirical",
                   level: float = 0.95, n_samples: int = 10_000, seed: int = 0,
                   x_scale: float = 0.1) -> BddThreshold:
    """Pick the BDD threshold.

    ``chi2`` uses the inverse CDF with m - (n - 1) degrees of freedom and
    applies to the noise-whitened residual. ``empirical`` takes the ``level``
    quantile of residual norms over simulated clean measurements
    ``H x + e`` with random states of magnitude ``x_scale``; the residual does
    not depend on x, which only keeps the simulation physically shaped.
    """
    if method == "chi2":
        dof = obs.m - obs.n_states
        return BddThreshold(float(np.sqrt(stats.chi2.ppf(level, dof))), "chi2", level)
    if method != "empirical":
        raise ValueError(f"unknown BDD threshold method {method!r}")
    if n_samples < 1000:
        raise ValueError("empirical calibration needs at least 1000 samples")
    if not 0.0 < level <= 1.0:
        raise ValueError("quantile level must be in (0, 1]")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-x_scale, x_scale, size=(n_samples, obs.n_states))
    z = x @ obs.H.T + noise.sample(rng, n_samples)
    r = WlsEstimator(obs, noise).residuals(z)
    return BddThreshold(float(np.quantile(r, level, method="higher")), "empirical", level)


def calibrate_tau1_from_data(obs: ObservationMatrix, noise: NoiseModel, Z: np.ndarray,
                             level: float = 0.95) -> BddThreshold:
    """Empirical threshold from recorded clean measurements (rows are samples)."""
    r = WlsEstimator(obs, noise).residuals(Z)
    return BddThreshold(float(np.quantile(r, level, method="higher")), "empirical", level)


def check_stealth(a: np.ndarray, z: np.ndarray, obs: ObservationMatrix, noise: NoiseModel,
                  tau1: BddThreshold) -> bool:
    """Imperfect-attack condition ||a - H c*|| <= tau1 - ||z - H x_hat||.

    ``c*`` is the state shift the estimator attributes to ``a``.
    """
    est = WlsEstimator(obs, noise)
    a = np.asarray(a, dtype=float)
    lhs = est.residuals(a, weighted=tau1.weighted)
    clean = est.residuals(np.asarray(z, dtype=float), weighted=tau1.weighted)
    tol = 1e-9 * max(1.0, float(np.linalg.norm(a)))
    return bool(lhs <= tau1.tau1 - clean + tol)
