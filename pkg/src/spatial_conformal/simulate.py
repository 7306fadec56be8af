"""Gaussian-process sampler and the eight benchmark scenarios.

Every scenario transforms a zero-mean Matérn field ``X`` (sill 3, range
0.1, smoothness 0.7, no nugget) and an independent standard-normal white
noise ``E``:

    1  X + E
    2  X^3 + E
    3  q(Phi(X / sqrt 3)) + E,  q the Gamma(shape 1, scale sqrt 3) quantile
    4  sqrt(3) X |E|
    5  sign(X) |X|^(s_x + 1) + E
    6  sqrt(w / 3) X + sqrt(1 - w) E,  w = Phi((s_x - 0.5) / 0.1)
    7  X + s_x E
    8  X + 10 exp(-50 ||s - (0.5, 0.5)||^2)

``X`` is always drawn before ``E`` from the same generator, so scenarios
sharing a seed share the latent field.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.stats import gamma, norm

from .covariance import (
    DegenerateCovarianceError,
    MaternParams,
    covariance_from_distances,
    distance_matrix,
)
from .kriging import SpatialDataset

SCENARIO_IDS = tuple(range(1, 9))
SAMPLING_JITTER = 1e-10
SPIKE_CENTER = (0.5, 0.5)

BASE_PARAMS = MaternParams(nugget=0.0, partial_sill=3.0, range=0.1, smoothness=0.7)


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int
    grid_side: int
    seed: int
    base_params: MaternParams = field(default=BASE_PARAMS)

    def __post_init__(self):
        if self.scenario_id not in SCENARIO_IDS:
            raise ValueError(f"scenario_id must be one of 1..8, got {self.scenario_id!r}")
        if int(self.grid_side) != self.grid_side or self.grid_side < 2:
            raise ValueError(f"grid_side must be an integer >= 2, got {self.grid_side!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["base_params"] = self.base_params.as_dict()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ScenarioSpec":
        payload = dict(payload)
        if "base_params" in payload:
            payload["base_params"] = MaternParams(**payload["base_params"])
        return cls(**payload)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def grid_locations(grid_side: int) -> np.ndarray:
    """Points ``{1/N, 2/N, ..., 1}^2``, ``s_x`` varying slowest."""
    ticks = np.arange(1, grid_side + 1) / grid_side
    sx, sy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([sx.ravel(), sy.ravel()])


def sample_uniform_locations(n: int, seed) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 2))


def _sampling_factor(locations, params: MaternParams) -> np.ndarray:
    cov = covariance_from_distances(distance_matrix(locations), params)
    cov[np.diag_indices_from(cov)] += SAMPLING_JITTER
    try:
        return sla.cholesky(cov, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise DegenerateCovarianceError("sampling covariance is not positive definite") from exc


def sample_gp(locations, params: MaternParams, seed, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Exact zero-mean Gaussian draw ``L z`` with ``L`` the Cholesky factor.

    Duplicate locations are allowed here (a tiny diagonal jitter keeps the
    factorization defined); the jitter never enters prediction.
    """
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    if rng is None:
        rng = np.random.default_rng(seed)
    if locs.shape[0] == 0:
        return np.empty(0)
    L = _sampling_factor(locs, params)
    return L @ rng.standard_normal(locs.shape[0])


def scenario_response(scenario_id: int, X: np.ndarray, E: np.ndarray, locations: np.ndarray) -> np.ndarray:
    """Apply one scenario's transform to the latent field and noise."""
    sx = locations[:, 0]
    if scenario_id == 1:
        return X + E
    if scenario_id == 2:
        return X**3 + E
    if scenario_id == 3:
        u = norm.cdf(X / math.sqrt(3.0))
        return gamma.ppf(u, a=1.0, scale=math.sqrt(3.0)) + E
    if scenario_id == 4:
        return math.sqrt(3.0) * X * np.abs(E)
    if scenario_id == 5:
        return np.sign(X) * np.abs(X) ** (sx + 1.0) + E
    if scenario_id == 6:
        w = norm.cdf((sx - 0.5) / 0.1)
        return np.sqrt(w / 3.0) * X + np.sqrt(1.0 - w) * E
    if scenario_id == 7:
        return X + sx * E
    if scenario_id == 8:
        c = np.asarray(SPIKE_CENTER)
        r2 = np.sum((locations - c) ** 2, axis=1)
        return X + 10.0 * np.exp(-50.0 * r2)
    raise ValueError(f"unknown scenario {scenario_id!r}")


def generate_fields(spec: ScenarioSpec, locations=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Locations, latent field ``X`` and noise ``E`` for a spec."""
    locs = grid_locations(spec.grid_side) if locations is None else np.asarray(locations, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(spec.seed)
    X = sample_gp(locs, spec.base_params, None, rng=rng)
    E = rng.standard_normal(locs.shape[0])
    return locs, X, E


def generate_scenario(spec: ScenarioSpec, locations=None, zero_noise: bool = False) -> SpatialDataset:
    """Simulate one scenario on the ``N x N`` grid (or on given locations).

    ``zero_noise`` forces ``E = 0``; it is a testing hook.
    """
    locs, X, E = generate_fields(spec, locations)
    if zero_noise:
        E = np.zeros_like(E)
    return SpatialDataset(locs, scenario_response(spec.scenario_id, X, E, locs))
