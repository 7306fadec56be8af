"""Leave-one-out evaluation: coverage, width and interval score.

For fold ``i`` the withheld location plus the remaining observations is the
full location set again, so the global methods reuse one precision matrix
for every fold; local methods invert only their neighborhood block of a
covariance matrix assembled once per dataset.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conformal import (
    BreakpointError,
    PredictionSet,
    breakpoint_intervals,
    conformal_threshold,
    contour_from_breakpoints,
    kernel_weights,
    neighbor_order,
    squared_distances,
)
from .covariance import (
    DegenerateCovarianceError,
    MaternParams,
    covariance_from_distances,
    precision_matrix,
)
from .ingest import center as center_data
from .kriging import SpatialDataset, normal_quantile
from .simulate import ScenarioSpec, generate_scenario
from .variogram import DEFAULT_KAPPA_GRID, estimate_params

log = logging.getLogger(__name__)

METHODS = ("gscp", "lscp", "slscp", "kriging")
METHOD_NAMES = {"gscp": "GSCP", "lscp": "LSCP", "slscp": "sLSCP", "kriging": "Kriging"}

TRUE_THETA = MaternParams(nugget=1.0, partial_sill=3.0, range=0.1, smoothness=0.7)
# Each parameter moved by +/- 50% in turn, true values first.
SENSITIVITY_ROWS = (
    TRUE_THETA,
    MaternParams(1.5, 3.0, 0.10, 0.70),
    MaternParams(0.5, 3.0, 0.10, 0.70),
    MaternParams(1.0, 4.5, 0.10, 0.70),
    MaternParams(1.0, 1.5, 0.10, 0.70),
    MaternParams(1.0, 3.0, 0.15, 0.70),
    MaternParams(1.0, 3.0, 0.05, 0.70),
    MaternParams(1.0, 3.0, 0.10, 1.05),
    MaternParams(1.0, 3.0, 0.10, 0.35),
)


def interval_score(lower, upper, y, alpha: float):
    """Interval score ``(u - l) + 2/alpha (l - y) 1{y < l} + 2/alpha (y - u) 1{y > u}``.

    Vectorized over its array arguments; averaging is left to the caller.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    yy = np.asarray(y, dtype=float)
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    under = np.where(yy < lo, lo - yy, 0.0)
    over = np.where(yy > hi, yy - hi, 0.0)
    score = (hi - lo) + (2.0 / alpha) * under + (2.0 / alpha) * over
    return float(score) if score.ndim == 0 else score


@dataclass(frozen=True)
class MethodConfig:
    """One prediction method and its tuning parameters."""

    method: str
    eta: Optional[float] = None
    m: Optional[int] = None
    M: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "lscp" and (self.m is None or self.m < 1):
            raise ValueError("lscp needs a neighbor count m >= 1")
        if self.method == "slscp" and not (self.eta is not None and self.eta > 0):
            raise ValueError("slscp needs a positive bandwidth eta")

    @property
    def name(self) -> str:
        return METHOD_NAMES[self.method]

    @classmethod
    def coerce(cls, value) -> "MethodConfig":
        return value if isinstance(value, MethodConfig) else cls(value)


# --------------------------------------------------------------------------
# Per-dataset engine

class LooEngine:
    """Shared matrices for leave-one-out prediction on one dataset."""

    def __init__(self, data: SpatialDataset, params: MaternParams, cov=None, precision=None):
        self.data = data
        self.params = params
        self.y = np.asarray(data.responses, dtype=float)
        self.n = len(data)
        self.d2 = squared_distances(data.locations, data.locations)
        if cov is None:
            cov = covariance_from_distances(np.sqrt(self.d2), params)
        self.cov = cov
        self._Q = precision
        self._g = None
        self._order = None

    @property
    def Q(self) -> np.ndarray:
        if self._Q is None:
            self._Q = precision_matrix(self.cov)
        return self._Q

    @property
    def g(self) -> np.ndarray:
        if self._g is None:
            self._g = self.Q @ self.y
        return self._g

    @property
    def order(self) -> np.ndarray:
        if self._order is None:
            self._order = neighbor_order(self.d2)
        return self._order

    def _others(self, t: int) -> np.ndarray:
        row = self.order[t]
        return row[row != t]

    def kriging(self, alpha: float) -> tuple[np.ndarray, np.ndarray]:
        q = np.diag(self.Q)
        means = self.y - self.g / q
        half = normal_quantile(alpha) / np.sqrt(q)
        return means - half, means + half

    def _global(self, t: int, alpha: float, weights=None, n_obs=None) -> PredictionSet:
        lower, upper = breakpoint_intervals(self.Q, self.y, target=t, g=self.g)
        contour = contour_from_breakpoints(lower, upper, weights)
        n_obs = self.n - 1 if n_obs is None else n_obs
        return contour.prediction_set(alpha, conformal_threshold(n_obs, alpha))

    def _local(self, t: int, neighbors: np.ndarray, alpha: float, weights=None) -> PredictionSet:
        sub = np.append(neighbors, t)
        Qs = precision_matrix(self.cov[np.ix_(sub, sub)])
        lower, upper = breakpoint_intervals(Qs, self.y[neighbors])
        contour = contour_from_breakpoints(lower, upper, weights)
        return contour.prediction_set(alpha, conformal_threshold(neighbors.size, alpha))

    def gscp(self, t: int, alpha: float) -> PredictionSet:
        return self._global(t, alpha)

    def lscp(self, t: int, alpha: float, m: int) -> PredictionSet:
        if not 1 <= m <= self.n - 1:
            raise ValueError(f"m must lie in [1, {self.n - 1}], got {m}")
        if m == self.n - 1:
            return self._global(t, alpha)
        return self._local(t, np.sort(self._others(t)[:m]), alpha)

    def choose_M(self, t: int, eta: float, n_neighbors: int = 15, min_M: int = 25) -> int:
        """Bandwidth rule for the fold withholding ``t``; matches :func:`conformal.choose_M`."""
        n_obs = self.n - 1
        d2t = self.d2[t]
        r2 = (2.0 * eta) ** 2
        inside = d2t <= r2 * (1.0 + 1e-12)
        inside[t] = False
        inner = np.flatnonzero(inside)
        reach2 = r2
        k = min(n_neighbors, n_obs - 1)
        if inner.size and k > 0:
            cand = self.order[inner, : k + 2]
            ok = (cand != inner[:, None]) & (cand != t)
            chosen = ok & (np.cumsum(ok, axis=1) <= k)
            reach2 = max(reach2, float(d2t[cand[chosen]].max()))
        within = d2t <= reach2 * (1.0 + 1e-12)
        within[t] = False
        M = int(np.count_nonzero(within))
        return int(min(max(M, min(min_M, n_obs)), n_obs))

    def slscp(self, t: int, alpha: float, eta: float, M: Optional[int] = None) -> PredictionSet:
        if M is None:
            M = self.choose_M(t, eta)
        if not 1 <= M <= self.n - 1:
            raise ValueError(f"M must lie in [1, {self.n - 1}], got {M}")
        if M == self.n - 1:
            others = np.delete(np.arange(self.n), t)
            w = kernel_weights(np.sqrt(self.d2[t, others]), eta)
            return self._global(t, alpha, w)
        neighbors = np.sort(self._others(t)[:M])
        w = kernel_weights(np.sqrt(self.d2[t, neighbors]), eta)
        return self._local(t, neighbors, alpha, w)

    def predict(self, t: int, config: MethodConfig, alpha: float) -> PredictionSet:
        if config.method == "gscp":
            return self.gscp(t, alpha)
        if config.method == "lscp":
            return self.lscp(t, alpha, config.m)
        if config.method == "slscp":
            return self.slscp(t, alpha, config.eta, config.M)
        lo, hi = self.kriging(alpha)
        return PredictionSet(alpha, ((float(lo[t]), float(hi[t])),), math.nan)


# --------------------------------------------------------------------------
# Results

@dataclass
class LooResult:
    """Per-location outcomes of one leave-one-out run."""

    method: str
    alpha: float
    locations: np.ndarray
    responses: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    covered: np.ndarray
    unbounded: np.ndarray
    n_components: np.ndarray
    failed: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        out = np.full(self.responses.shape, np.nan)
        ok = ~self.failed & ~self.unbounded
        out[ok] = interval_score(self.lower[ok], self.upper[ok], self.responses[ok], self.alpha)
        return out

    def report(self) -> "EvalReport":
        return aggregate([self])


@dataclass
class EvalReport:
    method: str
    alpha: float
    coverage: float
    mean_width: float
    interval_score: float
    n_locations: int
    n_replicates: int = 1
    n_unbounded: int = 0
    n_failed: int = 0
    n_disconnected: int = 0
    by_column: dict = field(default_factory=dict)
    scenario: Optional[int] = None
    grid_side: Optional[int] = None

    def to_row(self) -> dict:
        return {
            "scenario": self.scenario,
            "N": self.grid_side,
            "method": self.method,
            "Cov90" if abs(self.alpha - 0.1) < 1e-12 else f"Cov{round(100 * (1 - self.alpha))}": self.coverage,
            "Width": self.mean_width,
            "IntScore": self.interval_score,
            "n_replicates": self.n_replicates,
            "n_locations": self.n_locations,
            "n_unbounded": self.n_unbounded,
            "n_failed": self.n_failed,
        }

    def to_dict(self) -> dict:
        out = asdict(self)
        out["by_column"] = {repr(k): v for k, v in self.by_column.items()}
        return out


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else math.nan


def aggregate(results: Sequence[LooResult]) -> EvalReport:
    """Pool leave-one-out outcomes over replicates (fixed summation order).

    Coverage counts unbounded sets as covering; width and score average
    over bounded sets only. Failed locations are excluded and counted.
    """
    if not results:
        raise ValueError("nothing to aggregate")
    method = results[0].method
    alpha = results[0].alpha
    locs = np.concatenate([r.locations for r in results])
    y = np.concatenate([r.responses for r in results])
    lower = np.concatenate([r.lower for r in results])
    upper = np.concatenate([r.upper for r in results])
    covered = np.concatenate([r.covered for r in results])
    unbounded = np.concatenate([r.unbounded for r in results])
    failed = np.concatenate([r.failed for r in results])
    ncomp = np.concatenate([r.n_components for r in results])
    scores = np.concatenate([r.scores for r in results])
    ok = ~failed
    bounded = ok & ~unbounded
    width = upper - lower

    by_column = {}
    sx = np.round(locs[:, 0], 12)
    for key in np.unique(sx):
        sel = sx == key
        by_column[float(key)] = {
            "coverage": _mean(covered[sel & ok]),
            "width": _mean(width[sel & bounded]),
            "score": _mean(scores[sel & bounded]),
            "n": int(np.count_nonzero(sel & ok)),
            "n_bounded": int(np.count_nonzero(sel & bounded)),
        }
    return EvalReport(
        method=method,
        alpha=alpha,
        coverage=_mean(covered[ok]),
        mean_width=_mean(width[bounded]),
        interval_score=_mean(scores[bounded]),
        n_locations=int(np.count_nonzero(ok)),
        n_replicates=len(results),
        n_unbounded=int(np.count_nonzero(unbounded & ok)),
        n_failed=int(np.count_nonzero(failed)),
        n_disconnected=int(np.count_nonzero(ok & (ncomp > 1))),
        by_column=by_column,
    )


# --------------------------------------------------------------------------
# Leave-one-out drivers

def _resolve_params(data, params, kappa_grid):
    if params is not None:
        return params
    return estimate_params(data, kappa_grid=kappa_grid).params


def loo_outcomes(
    data: SpatialDataset,
    config,
    alpha: float = 0.1,
    params: Optional[MaternParams] = None,
    engine: Optional[LooEngine] = None,
    indices=None,
    kappa_grid=DEFAULT_KAPPA_GRID,
    center: bool = False,
) -> LooResult:
    """Prediction set for each (or each selected) location with its response withheld."""
    config = MethodConfig.coerce(config)
    if len(data) < 10:
        raise ValueError("leave-one-out evaluation needs at least 10 observations")
    offset = 0.0
    work = data
    if center:
        work, offset = center_data(data)
        engine = None
    if engine is None:
        engine = LooEngine(work, _resolve_params(work, params, kappa_grid))
    idx = np.arange(len(data)) if indices is None else np.asarray(indices, dtype=int)
    k = idx.size
    lower = np.full(k, np.nan)
    upper = np.full(k, np.nan)
    covered = np.zeros(k, dtype=bool)
    unbounded = np.zeros(k, dtype=bool)
    ncomp = np.zeros(k, dtype=int)
    failed = np.zeros(k, dtype=bool)
    y = work.responses

    if config.method == "kriging":
        lo, hi = engine.kriging(alpha)
        lower, upper = lo[idx], hi[idx]
        covered = (lower <= y[idx]) & (y[idx] <= upper)
        ncomp[:] = 1
    else:
        for pos, t in enumerate(idx):
            try:
                ps = engine.predict(int(t), config, alpha)
            except (BreakpointError, DegenerateCovarianceError) as exc:
                log.warning("fold %d failed: %s", t, exc)
                failed[pos] = True
                continue
            lower[pos], upper[pos] = ps.hull
            unbounded[pos] = ps.unbounded
            covered[pos] = ps.contains(float(y[t]))
            ncomp[pos] = len(ps.components)
    if n_failed := int(failed.sum()):
        log.warning("%s: %d of %d folds failed and were excluded", config.name, n_failed, k)
    return LooResult(
        config.name,
        alpha,
        data.locations[idx],
        data.responses[idx],
        lower + offset,
        upper + offset,
        covered,
        unbounded,
        ncomp,
        failed,
    )


def loo_evaluate(data: SpatialDataset, config, alpha: float = 0.1, **kwargs) -> EvalReport:
    """Leave-one-out coverage, mean width and interval score for one method."""
    return loo_outcomes(data, config, alpha, **kwargs).report()


# --------------------------------------------------------------------------
# Replicates

def _replicate(job) -> list[LooResult]:
    scenario_id, grid_side, seed, configs, alpha, params, kappa_grid = job
    data = generate_scenario(ScenarioSpec(scenario_id, grid_side, seed))
    engine = LooEngine(data, _resolve_params(data, params, kappa_grid))
    return [loo_outcomes(data, c, alpha, engine=engine) for c in configs]


def _map(fn, jobs_list, jobs: int):
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or len(jobs_list) <= 1:
        return [fn(j) for j in jobs_list]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_list))


def run_replicates(
    scenario_id: int,
    grid_side: int,
    configs,
    seeds,
    alpha: float = 0.1,
    params: Optional[MaternParams] = None,
    kappa_grid=DEFAULT_KAPPA_GRID,
    jobs: Optional[int] = 1,
) -> dict[str, EvalReport]:
    """Leave-one-out evaluation over simulated replicates.

    Covariance parameters are estimated once per replicate dataset unless
    ``params`` is given. Results are pooled in seed order, so the report does
    not depend on ``jobs``.
    """
    configs = [MethodConfig.coerce(c) for c in configs]
    work = [(scenario_id, grid_side, int(s), configs, alpha, params, tuple(kappa_grid)) for s in seeds]
    per_seed = _map(_replicate, work, jobs)
    reports = {}
    for j, config in enumerate(configs):
        key = _config_key(config)
        rep = aggregate([res[j] for res in per_seed])
        rep.scenario = scenario_id
        rep.grid_side = grid_side
        reports[key] = rep
    return reports


def _config_key(config: MethodConfig) -> str:
    if config.method == "slscp":
        return f"sLSCP(eta={config.eta:g})"
    if config.method == "lscp":
        return f"LSCP(m={config.m})"
    return config.name


# --------------------------------------------------------------------------
# Bandwidth selection

def bandwidth_scores(
    data: SpatialDataset,
    candidate_etas,
    alpha: float = 0.1,
    n_validation: Optional[int] = None,
    seed=0,
    params: Optional[MaternParams] = None,
    kappa_grid=DEFAULT_KAPPA_GRID,
) -> dict[float, float]:
    """Mean sLSCP interval score over withheld validation locations, per bandwidth.

    Unbounded prediction sets score ``inf``.
    """
    n = len(data)
    if n_validation is None or n_validation >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=n_validation, replace=False))
    engine = LooEngine(data, _resolve_params(data, params, kappa_grid))
    out = {}
    for eta in candidate_etas:
        res = loo_outcomes(data, MethodConfig("slscp", eta=float(eta)), alpha, engine=engine, indices=idx)
        s = res.scores
        s[res.unbounded] = np.inf
        out[float(eta)] = float(np.mean(s[~res.failed]))
    return out


def select_bandwidth(data, candidate_etas, alpha: float = 0.1, n_validation=None, seed=0, params=None, **kwargs) -> float:
    """Bandwidth with the smallest validation interval score; ties go to the smaller one."""
    etas = [float(e) for e in candidate_etas]
    if not etas:
        raise ValueError("candidate_etas must be nonempty")
    if len(set(etas)) == 1:
        return etas[0]
    scores = bandwidth_scores(data, sorted(set(etas)), alpha, n_validation, seed, params, **kwargs)
    return min(sorted(scores), key=lambda e: scores[e])


# --------------------------------------------------------------------------
# Sensitivity to the covariance parameters

@dataclass
class SensitivityRow:
    params: MaternParams
    gscp: EvalReport
    kriging: EvalReport

    def to_row(self) -> dict:
        return {
            **self.params.as_dict(),
            "gscp_cov": self.gscp.coverage,
            "gscp_width": self.gscp.mean_width,
            "kriging_cov": self.kriging.coverage,
            "kriging_width": self.kriging.mean_width,
        }


def _sensitivity_replicate(job) -> list[tuple[LooResult, LooResult]]:
    grid_side, seed, rows, alpha = job
    data = generate_scenario(ScenarioSpec(1, grid_side, seed))
    d = np.sqrt(squared_distances(data.locations, data.locations))
    out = []
    for params in rows:
        engine = LooEngine(data, params, cov=covariance_from_distances(d, params))
        out.append((loo_outcomes(data, "gscp", alpha, engine=engine), loo_outcomes(data, "kriging", alpha, engine=engine)))
    return out


def sensitivity_sweep(seeds, grid_side: int = 20, alpha: float = 0.1, rows=SENSITIVITY_ROWS, jobs: Optional[int] = 1) -> list[SensitivityRow]:
    """GSCP and Kriging on Scenario 1 with fixed, deliberately perturbed parameters."""
    rows = tuple(rows)
    per_seed = _map(_sensitivity_replicate, [(grid_side, int(s), rows, alpha) for s in seeds], jobs)
    table = []
    for j, params in enumerate(rows):
        table.append(
            SensitivityRow(
                params,
                aggregate([res[j][0] for res in per_seed]),
                aggregate([res[j][1] for res in per_seed]),
            )
        )
    return table


# --------------------------------------------------------------------------
# Serialization

def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    rows = [r.to_row() for r in reports]
    if not rows:
        raise ValueError("no reports to write")
    fields = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def json_safe(obj):
    """Copy of ``obj`` with non-finite floats replaced by ``None`` (strict JSON)."""
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def write_reports_json(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w") as fh:
        json.dump(json_safe([r.to_dict() for r in reports]), fh, indent=2, sort_keys=True, allow_nan=False)
