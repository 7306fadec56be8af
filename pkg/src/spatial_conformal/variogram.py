"""Empirical variograms and weighted least-squares Matérn fits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar, nnls
from scipy.spatial.distance import pdist

from .covariance import MaternParams, matern_correlation
from .kriging import SpatialDataset

DEFAULT_N_BINS = 13
DEFAULT_KAPPA_GRID = (0.3, 0.5, 0.7, 1.0, 1.5, 2.0)
MIN_RANGE = 1e-3
NUGGET_FLOOR_FRACTION = 1e-6


class InsufficientPairsError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalVariogram:
    bin_centers: np.ndarray
    semivariances: np.ndarray
    bin_counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.bin_centers, dtype=float)
        g = np.asarray(self.semivariances, dtype=float)
        k = np.asarray(self.bin_counts, dtype=np.int64)
        if not (c.shape == g.shape == k.shape):
            raise ValueError("variogram arrays must have equal lengths")
        if np.any(np.diff(c) <= 0):
            raise ValueError("bin centers must be strictly increasing")
        if np.any(k < 1) or np.any(g < 0):
            raise ValueError("bins need positive counts and non-negative semivariances")
        object.__setattr__(self, "bin_centers", c)
        object.__setattr__(self, "semivariances", g)
        object.__setattr__(self, "bin_counts", k)

    def __len__(self):
        return self.bin_centers.size


def default_max_dist(locations) -> float:
    """Half the diagonal of the bounding box."""
    locs = np.asarray(locations, dtype=float)
    return 0.5 * float(np.hypot(*(locs.max(axis=0) - locs.min(axis=0))))


def empirical_variogram(data: SpatialDataset, max_dist: float | None = None, n_bins: int = DEFAULT_N_BINS) -> EmpiricalVariogram:
    """Matheron estimator on equal-width bins ``[b w, (b + 1) w)`` over ``[0, max_dist)``.

    Empty bins are dropped. Each bin is located at the mean distance of its
    pairs rather than its midpoint, which matters on regular grids where
    pair distances are discrete.
    """
    if max_dist is None:
        max_dist = default_max_dist(data.locations)
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    d = pdist(data.locations)
    sq = pdist(data.responses.reshape(-1, 1), metric="sqeuclidean")
    width = max_dist / n_bins
    b = np.floor(d / width).astype(np.int64)
    keep = b < n_bins
    counts = np.bincount(b[keep], minlength=n_bins)
    sums = np.bincount(b[keep], weights=sq[keep], minlength=n_bins)
    dsums = np.bincount(b[keep], weights=d[keep], minlength=n_bins)
    nonempty = counts > 0
    if not nonempty.any():
        raise InsufficientPairsError("no pairs fall within max_dist")
    return EmpiricalVariogram(
        dsums[nonempty] / counts[nonempty],
        sums[nonempty] / (2.0 * counts[nonempty]),
        counts[nonempty],
    )


def model_semivariance(d, params: MaternParams):
    """``tau^2 + sigma^2 (1 - rho(d))`` for ``d > 0``."""
    return params.nugget + params.partial_sill * (1.0 - matern_correlation(d, params.range, params.smoothness))


def wls_objective(vg: EmpiricalVariogram, params: MaternParams) -> float:
    resid = vg.semivariances - model_semivariance(vg.bin_centers, params)
    return float(np.sum(vg.bin_counts * resid * resid))


@dataclass
class VariogramFit:
    params: MaternParams
    objective: float
    converged: bool = True
    degenerate: bool = False
    start_objectives: list = field(default_factory=list)


def _profile(vg: EmpiricalVariogram, range_: float, kappa: float, floor: float):
    """Best ``(nugget, partial_sill)`` for fixed range and smoothness by NNLS."""
    sw = np.sqrt(vg.bin_counts.astype(float))
    h = 1.0 - matern_correlation(vg.bin_centers, range_, kappa)
    A = np.column_stack([sw, sw * h])
    rhs = sw * (vg.semivariances - floor)
    coef, _ = nnls(A, rhs)
    nugget = floor + coef[0]
    sill = coef[1]
    resid = vg.semivariances - nugget - sill * h
    return nugget, sill, float(np.sum(vg.bin_counts * resid * resid))


def fit_matern(
    vg: EmpiricalVariogram,
    kappa_grid=DEFAULT_KAPPA_GRID,
    response_variance: float | None = None,
    n_starts: int = 12,
    max_range: float | None = None,
) -> VariogramFit:
    """Weighted least-squares Matérn fit to an empirical variogram.

    Minimizes ``sum_b count_b (gamma_b - gamma_model(center_b))^2``. The
    smoothness is searched over ``kappa_grid``; for each value the nugget
    and partial sill enter linearly and are solved exactly (non-negative
    least squares), leaving a bounded derivative-free search over
    ``log(range)`` started from ``n_starts`` log-spaced points.

    The nugget is bounded below by ``1e-6 * response_variance`` (or by the
    same fraction of the largest semivariance when the variance is not
    given) and the range by 1e-3.
    """
    if len(vg) < 4:
        raise ValueError(f"need at least 4 variogram bins, got {len(vg)}")
    kappas = [float(k) for k in kappa_grid]
    if not kappas or any(k <= 0 for k in kappas):
        raise ValueError("kappa_grid must be nonempty and positive")
    scale = response_variance if response_variance is not None else float(vg.semivariances.max())
    floor = NUGGET_FLOOR_FRACTION * scale if scale > 0 else 1e-12
    hi = max_range if max_range is not None else 2.0 * float(vg.bin_centers.max())
    hi = max(hi, 10 * MIN_RANGE)
    log_starts = np.linspace(math.log(MIN_RANGE), math.log(hi), n_starts)

    best = None
    start_objectives = []
    converged = True
    for kappa in kappas:
        prof = [_profile(vg, math.exp(t), kappa, floor) for t in log_starts]
        objs = np.array([p[2] for p in prof])
        for t, p in zip(log_starts, prof):
            start_objectives.append(p[2])
            if best is None or p[2] < best[0]:
                best = (p[2], p[0], p[1], math.exp(t), kappa)
        j = int(np.argmin(objs))
        lo_t = log_starts[max(j - 1, 0)]
        hi_t = log_starts[min(j + 1, n_starts - 1)]
        res = minimize_scalar(
            lambda t: _profile(vg, math.exp(t), kappa, floor)[2],
            bounds=(lo_t, hi_t),
            method="bounded",
            options={"xatol": 1e-6},
        )
        converged &= bool(res.success)
        nug, sill, obj = _profile(vg, math.exp(res.x), kappa, floor)
        if obj < best[0]:
            best = (obj, nug, sill, math.exp(res.x), kappa)

    obj, nug, sill, rng, kappa = best
    degenerate = sill <= 0 or float(vg.semivariances.max()) == 0
    if not converged:
        warnings.warn("variogram range search did not converge; returning best found", RuntimeWarning)
    return VariogramFit(
        MaternParams(nug, max(sill, 0.0), rng, kappa),
        obj,
        converged=converged,
        degenerate=degenerate,
        start_objectives=start_objectives,
    )


def estimate_params(data: SpatialDataset, kappa_grid=DEFAULT_KAPPA_GRID, max_dist=None, n_bins=DEFAULT_N_BINS) -> VariogramFit:
    """Empirical variogram plus fit, with the nugget floor set from the response variance."""
    vg = empirical_variogram(data, max_dist=max_dist, n_bins=n_bins)
    var = float(np.var(data.responses, ddof=1)) if len(data) > 1 else None
    return fit_matern(vg, kappa_grid, response_variance=var)
