import math

import numpy as np
import pytest

from spatial_conformal.covariance import MaternParams, covariance_matrix, cross_covariance, precision_matrix
from spatial_conformal.kriging import (
    LooPrediction,
    SpatialDataset,
    kriging_interval,
    loo_moments,
    loo_predictions,
    normal_quantile,
    predict_at,
)

Z_95 = 1.644853626951472714863848907991632136083  # mpmath sqrt(2) erfinv(0.9)
Z_90 = 1.28155156554460046696510332944874281862


def random_instance(rng, n):
    params = MaternParams(
        float(rng.uniform(0.05, 1.5)),
        float(rng.uniform(0.2, 4.0)),
        float(rng.uniform(0.03, 0.4)),
        float(rng.choice([0.3, 0.5, 0.7, 1.5, 2.2])),
    )
    data = SpatialDataset(rng.uniform(size=(n, 2)), rng.normal(scale=2.0, size=n))
    return data, params


def delete_one(data, params, i):
    """Conditional normal moments at s_i from the other observations, by direct solve."""
    rest = data.without(i)
    S = cross_covariance(rest.locations, rest.locations, params) + params.nugget * np.eye(len(rest))
    c = cross_covariance(rest.locations, data.locations[i : i + 1], params)[:, 0]
    w = np.linalg.solve(S, c)
    return float(w @ rest.responses), float(params.total_variance - c @ w)


def test_dataset_validation():
    with pytest.raises(ValueError):
        SpatialDataset([[0, 0], [1, 1]], [1.0])
    with pytest.raises(ValueError):
        SpatialDataset([[0, 0]], [math.nan])
    d = SpatialDataset([[0, 0], [1, 1]], [1.0, 2.0])
    assert len(d) == 2
    with pytest.raises(ValueError):
        d.responses[0] = 5.0


def test_dataset_helpers():
    d = SpatialDataset([[0, 0], [1, 0], [0, 1]], [1.0, 2.0, 3.0])
    assert d.without(1) == SpatialDataset([[0, 0], [0, 1]], [1.0, 3.0])
    assert d.subset([2, 0]) == SpatialDataset([[0, 1], [0, 0]], [3.0, 1.0])
    np.testing.assert_array_equal(d.shifted(1.0).responses, [2, 3, 4])


def test_pure_nugget():
    rng = np.random.default_rng(1)
    data = SpatialDataset(rng.uniform(size=(7, 2)), rng.normal(size=7))
    for pred in loo_predictions(data, MaternParams(0.7, 0.0, 0.1, 0.5)):
        assert pred.mean == 0.0
        assert pred.variance == pytest.approx(0.7, rel=1e-14)


def test_two_point_closed_form():
    p = MaternParams(0.3, 2.0, 0.2, 0.5)
    data = SpatialDataset([[0.1, 0.1], [0.3, 0.25]], [1.7, -0.4])
    c = 2.0 * math.exp(-0.25 / 0.2)
    a = p.total_variance
    preds = loo_predictions(data, p)
    assert preds[0].mean == pytest.approx(c / a * -0.4, rel=1e-12)
    assert preds[1].mean == pytest.approx(c / a * 1.7, rel=1e-12)
    assert preds[0].variance == pytest.approx(a - c * c / a, rel=1e-12)


def test_loo_matches_delete_one_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(15):
        n = int(rng.integers(2, 31))
        data, params = random_instance(rng, n)
        preds = loo_predictions(data, params)
        for i in range(n):
            mean, var = delete_one(data, params, i)
            assert abs(preds[i].mean - mean) <= 1e-8 * max(1.0, abs(mean))
            assert abs(preds[i].variance - var) <= 1e-8 * max(1.0, var)
            assert preds[i].residual == pytest.approx((data.responses[i] - preds[i].mean) / math.sqrt(preds[i].variance))


def test_variance_bounded_by_sill():
    rng = np.random.default_rng(4)
    data, params = random_instance(rng, 25)
    for pred in loo_predictions(data, params):
        assert pred.variance <= params.total_variance + 1e-10


def test_constant_shift_behavior():
    # Under the zero-mean model the LOO weights do not sum to one, so a shift
    # by c moves mean_i by c * sum_j w_ij rather than by c.
    rng = np.random.default_rng(9)
    data, params = random_instance(rng, 20)
    c = 3.5
    Q = precision_matrix(covariance_matrix(data.locations, params))
    q = np.diag(Q)
    weight_sums = -(Q.sum(axis=1) - q) / q
    m0, v0 = loo_moments(Q, data.responses)
    m1, v1 = loo_moments(Q, data.responses + c)
    np.testing.assert_array_equal(v0, v1)
    np.testing.assert_allclose(m1 - m0, c * weight_sums, atol=1e-10)
    e0 = (data.responses - m0) / np.sqrt(v0)
    e1 = (data.responses + c - m1) / np.sqrt(v1)
    assert np.all(np.abs(e1 - e0) * np.sqrt(v0) <= abs(c) * np.abs(1 - weight_sums) + 1e-10)


def test_predict_at_conditional_normal():
    p = MaternParams(0.2, 1.5, 0.3, 0.7)
    data = SpatialDataset([[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]], [0.4, -1.1, 2.0])
    target = [0.4, 0.35]
    S11 = covariance_matrix(data.locations, p)
    S21 = cross_covariance([target], data.locations, p)[0]
    w = np.linalg.solve(S11, S21)
    pred = predict_at(data, target, p)
    assert pred.mean == pytest.approx(float(w @ data.responses), rel=1e-12)
    assert pred.variance == pytest.approx(p.total_variance - float(S21 @ w), rel=1e-12)


def test_predict_at_interpolates_without_nugget():
    p = MaternParams(0.0, 1.5, 0.3, 0.7)
    data = SpatialDataset([[0.1, 0.2], [0.5, 0.5]], [0.4, -1.1])
    pred = predict_at(data, [0.5, 0.5], p)
    assert pred.mean == -1.1 and pred.variance == 0.0
    near = predict_at(data, [0.5, 0.5 + 1e-7], p)
    assert near.mean == pytest.approx(-1.1, abs=1e-3)
    assert near.variance < 1e-3


def test_predict_at_far_target():
    p = MaternParams(0.2, 1.5, 0.05, 0.7)
    data = SpatialDataset([[0.1, 0.2], [0.5, 0.5]], [0.4, -1.1])
    pred = predict_at(data, [1e3, 1e3], p)
    assert abs(pred.mean) < 1e-12
    assert pred.variance == pytest.approx(1.7, rel=1e-12)


def test_normal_quantile():
    assert normal_quantile(0.1) == pytest.approx(Z_95, abs=1e-12)
    assert normal_quantile(0.2) == pytest.approx(Z_90, abs=1e-12)
    with pytest.raises(ValueError):
        normal_quantile(1.0)


def test_kriging_interval():
    assert kriging_interval(LooPrediction(0, 0.0, 1.0), 0.1) == pytest.approx((-Z_95, Z_95), abs=1e-12)
    lo1, hi1 = kriging_interval(LooPrediction(0, 0.0, 1.0), 0.1)
    lo4, hi4 = kriging_interval(LooPrediction(0, 0.0, 4.0), 0.1)
    assert hi4 - lo4 == pytest.approx(2 * (hi1 - lo1), rel=1e-14)
    lo, hi = kriging_interval(LooPrediction(0, 2.29, 0.49), 0.2)
    assert (lo, hi) == pytest.approx((2.29 - 0.7 * Z_90, 2.29 + 0.7 * Z_90), abs=1e-12)


def test_frozen_quantiles_recompute():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 40
    assert float(mp.sqrt(2) * mp.erfinv(mp.mpf("0.9"))) == pytest.approx(Z_95, rel=1e-15)
    assert float(mp.sqrt(2) * mp.erfinv(mp.mpf("0.8"))) == pytest.approx(Z_90, rel=1e-15)
