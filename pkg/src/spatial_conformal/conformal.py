"""Spatial conformal prediction over Kriging residuals.

Three engines share one exact solver:

* global (GSCP): every observation carries weight 1/(n+1);
* local (LSCP): the same construction on the m nearest observations;
* smoothed local (sLSCP): Gaussian-kernel weights over the M nearest.

With the squared standardized Kriging residual as non-conformity score,
``delta_i - delta_{n+1}`` is a concave quadratic in the provisional value
``y`` of the unknown response, so ``{y : delta_i >= delta_{n+1}}`` is a
closed interval ``[a_i, b_i]`` and the plausibility contour is the step
function ``w_{n+1} + sum_i w_i 1{a_i <= y <= b_i}``. No candidate grid is
needed; :func:`grid_scan_contour` exists for user-defined scores and as a
cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .covariance import MaternParams, covariance_matrix, precision_matrix
from .kriging import SpatialDataset

LEVEL_TOL = 1e-12
UNIFORM_BANDWIDTH = 1e12
DEFAULT_NEIGHBORS_FOR_M = 15
DEFAULT_MIN_M = 25


class BreakpointError(ArithmeticError):
    """A breakpoint quadratic violated concavity or had a negative discriminant."""


# --------------------------------------------------------------------------
# Non-conformity measures

@dataclass(frozen=True)
class NonConformity:
    """Non-conformity measure.

    ``kind`` is ``"squared_std_kriging_residual"`` (default),
    ``"absolute_residual"`` (absolute standardized Kriging residual, a
    monotone transform of the default, hence the same contour) or
    ``"user_supplied"``. A user evaluator is called as
    ``evaluator(locations, responses, i)`` on the augmented data (target
    last, provisional value filled in) and must score ``responses[i]``
    against the bag of the remaining points without using ``responses[i]``.
    """

    kind: str = "squared_std_kriging_residual"
    evaluator: Optional[Callable] = field(default=None, compare=False)

    KINDS = ("squared_std_kriging_residual", "absolute_residual", "user_supplied")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown non-conformity kind {self.kind!r}")
        if self.kind == "user_supplied" and self.evaluator is None:
            raise ValueError("user_supplied measure needs an evaluator")

    @property
    def closed_form(self) -> bool:
        return self.kind != "user_supplied"


SQUARED_RESIDUAL = NonConformity()
ABSOLUTE_RESIDUAL = NonConformity("absolute_residual")


def user_measure(evaluator: Callable) -> NonConformity:
    return NonConformity("user_supplied", evaluator)


# --------------------------------------------------------------------------
# Thresholds and weights

def conformal_threshold(n: int, alpha: float) -> float:
    """``t_n(alpha) = floor((n + 1) alpha) / (n + 1)``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if n < 0:
        raise ValueError("n must be non-negative")
    # guard against products like 100 * 0.29 = 28.999999999999996
    k = math.floor((n + 1) * alpha + 1e-9)
    return k / (n + 1)


@dataclass(frozen=True)
class KernelWeights:
    """Normalized Gaussian-kernel weights; the target's own weight is last."""

    bandwidth: float
    weights: np.ndarray

    @property
    def self_weight(self) -> float:
        return float(self.weights[-1])


def kernel_weights(distances, bandwidth: float) -> KernelWeights:
    """Weights ``exp(-d_i^2 / 2 eta^2) / (1 + sum_j exp(-d_j^2 / 2 eta^2))``.

    The target's distance 0 is appended internally. Bandwidths of 1e12 and
    above are treated as infinite, which gives exactly uniform weights.
    Weights of very distant points may underflow to 0 for small bandwidths.
    """
    if not (bandwidth > 0):
        raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    d = np.asarray(distances, dtype=float).reshape(-1)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and non-negative")
    n = d.size
    if bandwidth >= UNIFORM_BANDWIDTH:
        return KernelWeights(float(bandwidth), np.full(n + 1, 1.0 / (n + 1)))
    k = np.exp(-(d * d) / (2.0 * bandwidth * bandwidth))
    total = 1.0 + math.fsum(k)
    w = np.append(k, 1.0) / total
    return KernelWeights(float(bandwidth), w)


def _weight_vector(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.full(n + 1, 1.0 / (n + 1))
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if w.shape != (n + 1,):
        raise ValueError(f"expected {n + 1} weights, got {w.shape}")
    return w


# --------------------------------------------------------------------------
# Step-function contour and level sets

@dataclass(frozen=True)
class PredictionSet:
    """Upper level set of a plausibility contour.

    ``components`` are disjoint closed intervals in increasing order;
    infinite endpoints mark an unbounded set.
    """

    alpha: float
    components: tuple
    threshold: float

    @property
    def empty(self) -> bool:
        return len(self.components) == 0

    @property
    def hull(self) -> tuple[float, float]:
        if self.empty:
            return (math.nan, math.nan)
        return (self.components[0][0], self.components[-1][1])

    @property
    def unbounded(self) -> bool:
        lo, hi = self.hull
        return math.isinf(lo) or math.isinf(hi)

    @property
    def width(self) -> float:
        """Hull width."""
        lo, hi = self.hull
        return hi - lo

    def contains(self, y: float) -> bool:
        return any(lo <= y <= hi for lo, hi in self.components)


@dataclass(frozen=True)
class PlausibilityContour:
    """Exact step function over candidate response values.

    ``segment_levels[j]`` is the level on the open segment ending at
    ``breakpoints[j]`` (``segment_levels[0]`` covers ``(-inf, x_0)`` and
    ``segment_levels[-1]`` covers ``(x_{K-1}, inf)``); ``point_levels[j]``
    is the level at ``breakpoints[j]`` itself.
    """

    breakpoints: np.ndarray
    point_levels: np.ndarray
    segment_levels: np.ndarray
    weights: np.ndarray

    def __call__(self, y):
        y_arr = np.asarray(y, dtype=float)
        K = self.breakpoints.size
        if K == 0:
            out = np.full(y_arr.shape, self.segment_levels[0])
        else:
            idx = np.searchsorted(self.breakpoints, y_arr, side="left")
            safe = np.minimum(idx, K - 1)
            at_point = (idx < K) & (self.breakpoints[safe] == y_arr)
            out = np.where(at_point, self.point_levels[safe], self.segment_levels[idx])
        return float(out) if out.ndim == 0 else out

    @property
    def self_weight(self) -> float:
        return float(self.weights[-1])

    def interleaved_levels(self) -> np.ndarray:
        K = self.breakpoints.size
        levels = np.empty(2 * K + 1)
        levels[0::2] = self.segment_levels
        levels[1::2] = self.point_levels
        return levels

    def level_set(self, threshold: float) -> list[tuple[float, float]]:
        """Closed intervals where the contour is at least ``threshold``."""
        K = self.breakpoints.size
        keep = self.interleaved_levels() >= threshold - LEVEL_TOL
        if not keep.any():
            return []
        edges = np.diff(np.concatenate(([0], keep.astype(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1) - 1
        bps = self.breakpoints
        out = []
        for s, e in zip(starts, ends):
            # element 2j+1 is breakpoint j; an open segment closes onto its end points
            lo = -math.inf if s == 0 else float(bps[(s - 1) // 2])
            hi = math.inf if e == 2 * K else float(bps[e // 2])
            out.append((lo, hi))
        return out

    def prediction_set(self, alpha: float, threshold: float) -> PredictionSet:
        return PredictionSet(alpha, tuple(self.level_set(threshold)), threshold)


def contour_from_breakpoints(lower, upper, weights=None) -> PlausibilityContour:
    """Assemble the step function ``w_self + sum_i w_i 1{a_i <= y <= b_i}``.

    Uniform weights are handled with integer counts so that levels are
    exact multiples of ``1 / (n + 1)``.
    """
    a = np.asarray(lower, dtype=float).reshape(-1)
    b = np.asarray(upper, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("lower and upper must have the same length")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("breakpoints must be finite")
    if np.any(a > b):
        raise ValueError("every interval needs lower <= upper")
    n = a.size
    w = _weight_vector(weights, n)
    bps = np.unique(np.concatenate([a, b]))

    if np.all(w == w[0]):
        a_sorted = np.sort(a)
        b_sorted = np.sort(b)
        a_le = np.searchsorted(a_sorted, bps, side="right")
        b_lt = np.searchsorted(b_sorted, bps, side="left")
        b_le = np.searchsorted(b_sorted, bps, side="right")
        point_levels = (a_le - b_lt + 1) / (n + 1)
        segment_levels = np.concatenate(([1], a_le - b_le + 1)) / (n + 1)
    else:
        w_obs = w[:-1]
        w_self = w[-1]
        oa = np.argsort(a, kind="stable")
        ob = np.argsort(b, kind="stable")
        cum_a = np.concatenate(([0.0], np.cumsum(w_obs[oa])))
        cum_b = np.concatenate(([0.0], np.cumsum(w_obs[ob])))
        a_le = cum_a[np.searchsorted(a[oa], bps, side="right")]
        b_lt = cum_b[np.searchsorted(b[ob], bps, side="left")]
        b_le = cum_b[np.searchsorted(b[ob], bps, side="right")]
        point_levels = w_self + (a_le - b_lt)
        segment_levels = np.concatenate(([w_self], w_self + (a_le - b_le)))
        segment_levels[-1] = w_self
    return PlausibilityContour(bps, point_levels, segment_levels, w)


# --------------------------------------------------------------------------
# Closed-form breakpoints

def _system_terms(Q: np.ndarray, y: np.ndarray, t: int, g: Optional[np.ndarray] = None):
    """Pieces of the breakpoint quadratics for target index ``t``.

    ``y[t]`` is ignored. ``g`` may carry a precomputed ``Q @ y`` (with the
    true ``y[t]`` still in place), which the leave-one-out harness reuses.
    """
    if g is None:
        y0 = np.array(y, dtype=float)
        y0[t] = 0.0
        s_all = Q @ y0
    else:
        s_all = g - Q[:, t] * y[t]
    k = Q.shape[0]
    others = np.concatenate((np.arange(t), np.arange(t + 1, k)))
    q_tt = Q[t, t]
    yhat_t = -s_all[t] / q_tt
    q_ii = Q[others, others]
    c = Q[others, t]
    s = s_all[others]
    return q_ii, c, s, q_tt, yhat_t


def _quadratic(q_ii, c, s, q_tt, yhat_t):
    r = s / q_ii
    U = q_ii * r * r - q_tt * yhat_t * yhat_t
    V = 2.0 * c * r + 2.0 * q_tt * yhat_t
    W = c * c / q_ii - q_tt
    return U, V, W


def _check_quadratic(U, V, W):
    if np.any(W >= 0):
        raise BreakpointError("breakpoint quadratic is not concave (W >= 0)")
    disc = V * V - 4.0 * U * W
    scale = V * V + np.abs(4.0 * U * W) + np.finfo(float).tiny
    if np.any(disc < -1e-9 * scale):
        raise BreakpointError("negative discriminant in breakpoint quadratic")


def _roots(q_ii, c, s, q_tt, yhat_t):
    # delta_i = (A + B y)^2 and delta_t = C^2 (y - yhat_t)^2 with C > |B|,
    # so the two crossings solve A + B y = +/- C (y - yhat_t); no cancellation.
    sq = np.sqrt(q_ii)
    A = s / sq
    B = c / sq
    C = math.sqrt(q_tt)
    r1 = (A + C * yhat_t) / (C - B)
    r2 = (C * yhat_t - A) / (C + B)
    return np.minimum(r1, r2), np.maximum(r1, r2)


def breakpoint_intervals(Q, responses, target: Optional[int] = None, g=None, check: bool = True):
    """Intervals ``[a_i, b_i] = {y : delta_i >= delta_target}`` for all i.

    Parameters
    ----------
    Q : ndarray, shape (k, k)
        Precision matrix of the augmented location set.
    responses : ndarray
        Length ``k - 1`` (target last, response unknown) when ``target`` is
        None; otherwise length ``k`` with ``responses[target]`` ignored.
    target : int, optional
        Index of the prediction location in ``Q``. Defaults to the last.

    Returns
    -------
    lower, upper : ndarray
        Breakpoints for the non-target indices, in index order.
    """
    Q = np.asarray(Q, dtype=float)
    y = np.asarray(responses, dtype=float)
    k = Q.shape[0]
    if target is None:
        if y.size != k - 1:
            raise ValueError(f"expected {k - 1} responses, got {y.size}")
        y = np.append(y, 0.0)
        target = k - 1
    elif y.size != k:
        raise ValueError(f"expected {k} responses, got {y.size}")
    terms = _system_terms(Q, y, target, g)
    if check:
        _check_quadratic(*_quadratic(*terms))
    return _roots(*terms)


def quadratic_coefficients(Q, responses):
    """``(U, V, W)`` with ``delta_i - delta_{n+1} = U_i + V_i y + W_i y^2`` (target last)."""
    Q = np.asarray(Q, dtype=float)
    y = np.append(np.asarray(responses, dtype=float), 0.0)
    return _quadratic(*_system_terms(Q, y, Q.shape[0] - 1))


def quadratic_breakpoints(Q, responses, i: int) -> tuple[float, float]:
    """Closed interval ``[a_i, b_i]`` for observation ``i`` (target last)."""
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0] - 1
    if not 0 <= i < n:
        raise IndexError(f"observation index {i} out of range for n={n}")
    lower, upper = breakpoint_intervals(Q, responses)
    return float(lower[i]), float(upper[i])


# --------------------------------------------------------------------------
# Neighborhoods

def squared_distances(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    return dx * dx + dy * dy


def neighbor_order(sq_dist) -> np.ndarray:
    """Stable ordering by squared distance; ties go to the lower index.

    Squared distances are rounded to 12 decimals first so that ties that are
    exact in real arithmetic (regular grids) are not split by rounding noise.
    """
    key = np.round(np.asarray(sq_dist, dtype=float), 12)
    return np.argsort(key, axis=-1, kind="stable")


def nearest_indices(locations, target, m: int) -> np.ndarray:
    d2 = squared_distances(np.asarray(target).reshape(1, 2), locations)[0]
    return neighbor_order(d2)[:m]


def _within(d2, r2):
    return d2 <= r2 * (1.0 + 1e-12)


def choose_M(
    data: SpatialDataset,
    target,
    bandwidth: float,
    n_neighbors: int = DEFAULT_NEIGHBORS_FOR_M,
    min_M: int = DEFAULT_MIN_M,
) -> int:
    """Neighborhood size for sLSCP from the kernel bandwidth.

    Counts observations within ``2 eta + r*`` of the target, where ``r*`` is
    the smallest extra radius that puts the ``n_neighbors`` nearest
    neighbors of every observation within ``2 eta`` of the target inside the
    neighborhood. The count is clamped to ``[min_M, n]``.
    """
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    n = len(data)
    locs = data.locations
    d2t = squared_distances(np.asarray(target, dtype=float).reshape(1, 2), locs)[0]
    r2 = (2.0 * bandwidth) ** 2
    inner = np.flatnonzero(_within(d2t, r2))
    reach2 = r2
    k = min(n_neighbors, n - 1)
    if inner.size and k > 0:
        d2 = squared_distances(locs[inner], locs)
        d2[np.arange(inner.size), inner] = np.inf
        nbrs = neighbor_order(d2)[:, :k]
        reach2 = max(reach2, float(d2t[nbrs].max()))
    M = int(np.count_nonzero(_within(d2t, reach2)))
    return int(min(max(M, min(min_M, n)), n))


# --------------------------------------------------------------------------
# Engines

def _augmented(data: SpatialDataset, target, params: MaternParams):
    target = np.asarray(target, dtype=float).reshape(2)
    if not np.all(np.isfinite(target)):
        raise ValueError("target must be finite")
    if len(data) < 1:
        raise ValueError("data must be nonempty")
    locs = np.vstack([data.locations, target])
    Q = precision_matrix(covariance_matrix(locs, params, check=False))
    return locs, Q


def _closed_form_contour(data, target, params, weights=None) -> PlausibilityContour:
    _, Q = _augmented(data, target, params)
    lower, upper = breakpoint_intervals(Q, data.responses)
    return contour_from_breakpoints(lower, upper, weights)


def gscp_contour(data: SpatialDataset, target, params: MaternParams, measure: NonConformity = SQUARED_RESIDUAL):
    """Global plausibility contour at ``target``.

    Closed form for the built-in measures; user-supplied measures fall back
    to :func:`grid_scan_contour` on the default candidate grid.
    """
    if measure.closed_form:
        return _closed_form_contour(data, target, params)
    return grid_scan_contour(data, target, params, measure)


def _validate_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def gscp_interval(data, target, params, alpha: float, measure: NonConformity = SQUARED_RESIDUAL) -> PredictionSet:
    """Global spatial conformal prediction set at level ``1 - alpha``."""
    _validate_alpha(alpha)
    contour = gscp_contour(data, target, params, measure)
    return contour.prediction_set(alpha, conformal_threshold(len(data), alpha))


def lscp_contour(data, target, params, m: int, measure: NonConformity = SQUARED_RESIDUAL):
    """Global contour built from the ``m`` observations nearest to ``target``."""
    n = len(data)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    idx = np.sort(nearest_indices(data.locations, target, m))
    return gscp_contour(data.subset(idx), target, params, measure)


def lscp_interval(data, target, params, alpha: float, m: int, measure: NonConformity = SQUARED_RESIDUAL) -> PredictionSet:
    """GSCP restricted to the ``m`` observations nearest to ``target``."""
    _validate_alpha(alpha)
    contour = lscp_contour(data, target, params, m, measure)
    return contour.prediction_set(alpha, conformal_threshold(m, alpha))


def slscp_contour(data, target, params, bandwidth: float, M: Optional[int] = None, measure: NonConformity = SQUARED_RESIDUAL):
    """Kernel-weighted contour over the ``M`` nearest observations.

    Returns ``(contour, M)``; ``M`` comes from :func:`choose_M` when not given.
    """
    n = len(data)
    if M is None:
        M = choose_M(data, target, bandwidth)
    if not 1 <= M <= n:
        raise ValueError(f"M must lie in [1, {n}], got {M}")
    idx = np.sort(nearest_indices(data.locations, target, M))
    local = data.subset(idx)
    d = np.sqrt(squared_distances(np.asarray(target, dtype=float).reshape(1, 2), local.locations)[0])
    weights = kernel_weights(d, bandwidth)
    if measure.closed_form:
        return _closed_form_contour(local, target, params, weights), M
    return grid_scan_contour(local, target, params, measure, weights=weights), M


def slscp_interval(
    data,
    target,
    params,
    alpha: float,
    bandwidth: float,
    M: Optional[int] = None,
    measure: NonConformity = SQUARED_RESIDUAL,
) -> PredictionSet:
    """Smoothed local conformal prediction set with Gaussian-kernel weights.

    Works on the ``M`` nearest observations (chosen by :func:`choose_M`
    when not given) and thresholds at ``t_M(alpha)``.
    """
    _validate_alpha(alpha)
    contour, M = slscp_contour(data, target, params, bandwidth, M, measure)
    return contour.prediction_set(alpha, conformal_threshold(M, alpha))


# --------------------------------------------------------------------------
# Grid scan

@dataclass(frozen=True)
class SampledContour:
    """Plausibility evaluated on a finite candidate grid."""

    grid: np.ndarray
    levels: np.ndarray
    weights: np.ndarray

    def __call__(self, y):
        idx = np.searchsorted(self.grid, y)
        if np.any(idx >= self.grid.size) or np.any(self.grid[np.minimum(idx, self.grid.size - 1)] != y):
            raise KeyError("sampled contour is only defined on its grid")
        return self.levels[idx]

    def level_set(self, threshold: float) -> list[tuple[float, float]]:
        keep = self.levels >= threshold - LEVEL_TOL
        if not keep.any():
            return []
        edges = np.diff(np.concatenate(([0], keep.astype(np.int8), [0])))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1) - 1
        return [(float(self.grid[s]), float(self.grid[e])) for s, e in zip(starts, ends)]

    def prediction_set(self, alpha: float, threshold: float) -> PredictionSet:
        return PredictionSet(alpha, tuple(self.level_set(threshold)), threshold)


def default_candidate_grid(Q: np.ndarray, responses, size: int = 2001) -> np.ndarray:
    """``yhat +/- 8 sqrt(v (1 + max e_i^2))`` around the Kriging mean at the target."""
    y = np.append(np.asarray(responses, dtype=float), 0.0)
    q_tt = Q[-1, -1]
    yhat = -float(Q[-1, :-1] @ y[:-1]) / q_tt
    y[-1] = yhat
    e = (Q @ y) / np.sqrt(np.diag(Q))
    half = 8.0 * math.sqrt((1.0 / q_tt) * (1.0 + float(np.max(e * e))))
    return np.linspace(yhat - half, yhat + half, size)


def kriging_scores(Q: np.ndarray, Y: np.ndarray, kind: str = "squared_std_kriging_residual") -> np.ndarray:
    """Standardized-residual scores for each row of ``Y`` (rows are response vectors).

    ``e_i = (Y_i - Yhat_i) / sqrt(v_i) = (Q Y)_i / sqrt(q_ii)``.
    """
    e = (np.atleast_2d(Y) @ Q) / np.sqrt(np.diag(Q))
    if kind == "absolute_residual":
        return np.abs(e)
    return e * e


def grid_scan_contour(
    data: SpatialDataset,
    target,
    params: MaternParams,
    measure: NonConformity = SQUARED_RESIDUAL,
    candidate_grid=None,
    weights=None,
) -> SampledContour:
    """Plausibility at each candidate by recomputing every score with the candidate inserted."""
    locs, Q = _augmented(data, target, params)
    n = len(data)
    w = _weight_vector(weights, n)
    grid = default_candidate_grid(Q, data.responses) if candidate_grid is None else np.asarray(candidate_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("candidate grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) < 0):
        raise ValueError("candidate grid must be sorted")
    Y = np.empty((grid.size, n + 1))
    Y[:, :n] = data.responses
    Y[:, n] = grid
    if measure.closed_form:
        scores = kriging_scores(Q, Y, measure.kind)
    else:
        scores = np.array(
            [[measure.evaluator(locs, row, i) for i in range(n + 1)] for row in Y]
        )
    hits = scores >= scores[:, -1:]
    if np.all(w == w[0]):
        levels = hits.sum(axis=1) / (n + 1)
    else:
        levels = hits @ w
    return SampledContour(grid, levels, w)
