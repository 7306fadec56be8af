"""Leave-one-out Kriging from a single precision matrix.

For a zero-mean Gaussian vector with precision ``Q``, the conditional
moments of component ``i`` given all the others are

    mean_i = -(1 / q_ii) * sum_{j != i} q_ij y_j,    var_i = 1 / q_ii,

so every leave-one-out prediction comes out of one factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .covariance import MaternParams, covariance_matrix, precision_matrix


@dataclass(frozen=True)
class SpatialDataset:
    """Planar locations paired with scalar responses."""

    locations: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        locs = np.array(self.locations, dtype=float, copy=True).reshape(-1, 2)
        y = np.array(self.responses, dtype=float, copy=True).reshape(-1)
        if locs.shape[0] != y.shape[0]:
            raise ValueError(
                f"{locs.shape[0]} locations but {y.shape[0]} responses"
            )
        if not (np.all(np.isfinite(locs)) and np.all(np.isfinite(y))):
            raise ValueError("locations and responses must be finite")
        locs.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "responses", y)

    def __len__(self) -> int:
        return self.responses.shape[0]

    def subset(self, index) -> "SpatialDataset":
        index = np.asarray(index, dtype=int)
        return SpatialDataset(self.locations[index], self.responses[index])

    def without(self, i: int) -> "SpatialDataset":
        keep = np.ones(len(self), dtype=bool)
        keep[i] = False
        return SpatialDataset(self.locations[keep], self.responses[keep])

    def shifted(self, offset: float) -> "SpatialDataset":
        return SpatialDataset(self.locations, self.responses + offset)

    def __eq__(self, other):
        if not isinstance(other, SpatialDataset):
            return NotImplemented
        return np.array_equal(self.locations, other.locations) and np.array_equal(
            self.responses, other.responses
        )

    __hash__ = None


@dataclass(frozen=True)
class LooPrediction:
    """Conditional mean, variance and standardized residual at one location.

    ``residual`` is NaN when the response at the location is unknown.
    """

    index: int
    mean: float
    variance: float
    residual: float = math.nan


def loo_moments(Q: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized leave-one-out means and variances from a precision matrix."""
    q_diag = np.diag(Q)
    g = Q @ y
    means = y - g / q_diag
    return means, 1.0 / q_diag


def loo_predictions(data: SpatialDataset, params: MaternParams) -> list[LooPrediction]:
    """Leave-one-out Kriging predictions for every observation."""
    if len(data) < 2:
        raise ValueError("at least two observations are required")
    Q = precision_matrix(covariance_matrix(data.locations, params))
    y = data.responses
    means, variances = loo_moments(Q, y)
    residuals = (y - means) / np.sqrt(variances)
    return [
        LooPrediction(i, float(m), float(v), float(e))
        for i, (m, v, e) in enumerate(zip(means, variances, residuals))
    ]


def predict_at(data: SpatialDataset, target, params: MaternParams) -> LooPrediction:
    """Kriging mean and variance at an unobserved target.

    The target is appended as location n+1 and its row of the augmented
    precision matrix supplies the moments.
    """
    if len(data) < 1:
        raise ValueError("data must be nonempty")
    target = np.asarray(target, dtype=float).reshape(2)
    if not np.all(np.isfinite(target)):
        raise ValueError("target must be finite")
    if params.nugget == 0:
        hit = np.flatnonzero(np.all(data.locations == target, axis=1))
        if hit.size:
            # noiseless model interpolates exactly
            return LooPrediction(len(data), float(data.responses[hit[0]]), 0.0)
    locs = np.vstack([data.locations, target])
    Q = precision_matrix(covariance_matrix(locs, params))
    q_tt = Q[-1, -1]
    mean = -float(Q[-1, :-1] @ data.responses) / q_tt
    return LooPrediction(len(data), mean, 1.0 / q_tt)


def normal_quantile(alpha: float) -> float:
    """Upper ``alpha/2`` standard normal quantile."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    return float(norm.isf(alpha / 2.0))


def kriging_interval(pred: LooPrediction, alpha: float) -> tuple[float, float]:
    """Gaussian prediction interval ``mean -/+ z_{alpha/2} sqrt(variance)``."""
    half = normal_quantile(alpha) * math.sqrt(pred.variance)
    return pred.mean - half, pred.mean + half
