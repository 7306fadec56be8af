"""Matérn correlation, covariance assembly and precision matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import special
from scipy.spatial.distance import cdist, pdist, squareform

CORRELATION_FLOOR = 1e-300
MAX_DENSE_INVERSE = 4000


class DegenerateCovarianceError(ValueError):
    """Raised when a covariance matrix is not (numerically) positive definite."""


@dataclass(frozen=True)
class MaternParams:
    """Matérn covariance parameters.

    Parameters
    ----------
    nugget : float
        Variance of the location-independent noise (tau^2 >= 0).
    partial_sill : float
        Variance of the spatially correlated component (sigma^2 >= 0).
    range : float
        Correlation range (phi > 0).
    smoothness : float
        Matérn smoothness (kappa > 0).
    """

    nugget: float
    partial_sill: float
    range: float
    smoothness: float

    def __post_init__(self):
        for name in ("nugget", "partial_sill", "range", "smoothness"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.nugget < 0 or self.partial_sill < 0:
            raise ValueError("nugget and partial_sill must be non-negative")
        if self.range <= 0 or self.smoothness <= 0:
            raise ValueError("range and smoothness must be positive")
        if self.nugget + self.partial_sill <= 0:
            raise ValueError("nugget + partial_sill must be positive")

    @property
    def total_variance(self) -> float:
        return self.nugget + self.partial_sill

    def as_dict(self) -> dict:
        return {
            "nugget": self.nugget,
            "partial_sill": self.partial_sill,
            "range": self.range,
            "smoothness": self.smoothness,
        }


def matern_correlation(d, range, smoothness):
    """Matérn correlation rho(d; phi, kappa) with the sqrt(2 kappa) scaling.

    Evaluated in log space through the exponentially scaled Bessel function
    so neither the small-argument blow-up of K_kappa nor its large-argument
    underflow leaks into the product. ``rho(0) = 1`` by continuity; values
    below 1e-300 are returned as 0.

    Parameters
    ----------
    d : float or array_like
        Non-negative distances.
    range : float
        Range parameter phi > 0.
    smoothness : float
        Smoothness parameter kappa > 0.

    Returns
    -------
    float or ndarray
        Correlations in [0, 1], same shape as ``d``.
    """
    if not (math.isfinite(range) and range > 0):
        raise ValueError(f"range must be finite and positive, got {range!r}")
    if not (math.isfinite(smoothness) and smoothness > 0):
        raise ValueError(f"smoothness must be finite and positive, got {smoothness!r}")
    d_arr = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d_arr)):
        raise ValueError("distances must be finite")
    if np.any(d_arr < 0):
        raise ValueError("distances must be non-negative")

    kappa = float(smoothness)
    x = d_arr * (math.sqrt(2.0 * kappa) / range)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            kve = special.kve(kappa, xp)
            log_rho = (
                (1.0 - kappa) * math.log(2.0)
                - special.gammaln(kappa)
                + kappa * np.log(xp)
                + np.log(kve)
                - xp
            )
            vals = np.exp(log_rho)
        # kve overflows only for arguments so small that rho is 1 to machine precision
        vals = np.where(np.isfinite(vals), vals, 1.0)
        vals = np.minimum(vals, 1.0)
        vals[vals < CORRELATION_FLOOR] = 0.0
        out[pos] = vals
    if out.ndim == 0:
        return float(out)
    return out


def matern_covariance(d, params: MaternParams):
    """Covariance ``sigma^2 rho(d)`` without the nugget term."""
    return params.partial_sill * matern_correlation(d, params.range, params.smoothness)


def _as_locations(locations) -> np.ndarray:
    locs = np.asarray(locations, dtype=float)
    if locs.ndim != 2 or locs.shape[1] != 2:
        raise ValueError(f"locations must have shape (n, 2), got {locs.shape}")
    if not np.all(np.isfinite(locs)):
        raise ValueError("locations must be finite")
    return locs


def distance_matrix(locations) -> np.ndarray:
    locs = _as_locations(locations)
    return squareform(pdist(locs))


def covariance_from_distances(dist: np.ndarray, params: MaternParams) -> np.ndarray:
    """Covariance matrix from a square distance matrix.

    Grid-like location sets repeat distances heavily, so the Bessel
    function is evaluated once per distinct distance.
    """
    n = dist.shape[0]
    iu = np.triu_indices(n, k=1)
    upper = dist[iu]
    if params.partial_sill > 0 and upper.size:
        uniq, inv = np.unique(upper, return_inverse=True)
        cov_upper = matern_covariance(uniq, params)[inv]
    else:
        cov_upper = np.zeros_like(upper)
    cov = np.empty((n, n))
    cov[iu] = cov_upper
    cov.T[iu] = cov_upper
    np.fill_diagonal(cov, params.partial_sill + params.nugget)
    return cov


def covariance_matrix(locations, params: MaternParams, check: bool = True) -> np.ndarray:
    """Covariance matrix with entries ``sigma^2 rho(||s_i - s_j||) + 1{i=j} tau^2``.

    Duplicate locations are rejected when the nugget is zero, since the
    matrix would be singular.
    """
    locs = _as_locations(locations)
    if locs.shape[0] < 2:
        raise ValueError("at least two locations are required")
    dist = squareform(pdist(locs))
    if params.nugget == 0:
        off = dist[np.triu_indices(locs.shape[0], k=1)]
        if np.any(off == 0):
            raise DegenerateCovarianceError("duplicate locations with zero nugget")
    cov = covariance_from_distances(dist, params)
    if check:
        try:
            sla.cholesky(cov, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise DegenerateCovarianceError("covariance matrix is not positive definite") from exc
    return cov


def cross_covariance(locations_a, locations_b, params: MaternParams) -> np.ndarray:
    """Covariance between two location sets (nugget excluded)."""
    dist = cdist(_as_locations(locations_a), _as_locations(locations_b))
    return matern_covariance(dist, params)


def precision_matrix(cov) -> np.ndarray:
    """Inverse of a symmetric positive-definite covariance via Cholesky."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if cov.shape[0] > MAX_DENSE_INVERSE:
        raise ValueError(f"dense inversion is limited to {MAX_DENSE_INVERSE} locations, got {cov.shape[0]}")
    factor, info = sla.lapack.dpotrf(cov, lower=1, clean=1)
    if info != 0:
        raise DegenerateCovarianceError(f"Cholesky factorization failed (info={info})")
    inv, info = sla.lapack.dpotri(factor, lower=1)
    if info != 0:
        raise DegenerateCovarianceError(f"inversion from Cholesky factor failed (info={info})")
    # dpotri fills the lower triangle only
    inv = np.tril(inv)
    inv = inv + np.tril(inv, -1).T
    return inv
