import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from shfm.errors import InputError, NumericalError
from shfm.kernels import MaternParams, distance_matrix, matern_correlation
from shfm.predict import (
    bounding_box_grid,
    city_mean_factor,
    conditional_moments,
    posterior_ranks,
    predict_theta,
)


def draws_dict(theta, theta0, delta2, lambda1):
    theta = np.atleast_2d(theta)
    s = theta.shape[0]
    return {
        "theta": theta,
        "theta0": np.full((s, 1), theta0),
        "delta2": np.full((s, 1), delta2),
        "lambda1": np.full((s, 1), lambda1),
    }


def test_far_city_reverts_to_prior():
    d = draws_dict([[1.3, -0.4]], 0.2, 1.7, 1.0)
    pred = predict_theta(d, [[1e5, 1e5]], [[0, 0], [3, 0]])
    assert pred.cond_mean[0, 0] == pytest.approx(0.2, abs=1e-12)
    assert pred.cond_cov[0, 0, 0] == pytest.approx(1.7, abs=1e-12)


def test_bivariate_conditioning():
    lam = 2.0
    r = matern_correlation(3.0, MaternParams(lam))
    d = draws_dict([[1.5]], 0.5, 2.0, lam)
    pred = predict_theta(d, [[3.0, 0.0]], [[0.0, 0.0]])
    assert pred.cond_mean[0, 0] == pytest.approx(0.5 + r * 1.0, abs=1e-14)
    assert pred.cond_cov[0, 0, 0] == pytest.approx(2.0 * (1 - r * r), abs=1e-14)


def _dense_case(rng):
    pts = rng.uniform(0, 10, size=(5, 2))
    lam = float(np.exp(rng.normal()) * 2)
    theta0, delta2 = float(rng.normal()), float(np.exp(rng.normal()))
    h = matern_correlation(distance_matrix(pts), MaternParams(lam))
    np.fill_diagonal(h, 1.0)
    theta_g = rng.normal(size=3)
    return pts, lam, theta0, delta2, h, theta_g


def test_dense_joint_conditioning_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts, lam, theta0, delta2, h, theta_g = _dense_case(rng)
        pred = predict_theta(draws_dict([theta_g], theta0, delta2, lam), pts[3:], pts[:3])
        mean, cov = oracles.dense_conditional(theta_g, theta0, delta2, delta2 * h, 3)
        np.testing.assert_allclose(pred.cond_mean[0], mean, atol=1e-10)
        np.testing.assert_allclose(pred.cond_cov[0], cov, atol=1e-10)


def test_samples_follow_conditional_law():
    rng = np.random.default_rng(1)
    pts, lam, theta0, delta2, h, theta_g = _dense_case(rng)
    d = draws_dict(np.repeat(theta_g[None], 20000, axis=0), theta0, delta2, lam)
    pred = predict_theta(d, pts[3:], pts[:3], rng=np.random.default_rng(2))
    mean, cov = oracles.dense_conditional(theta_g, theta0, delta2, delta2 * h, 3)
    se = np.sqrt(np.diag(cov) / 20000)
    assert np.all(np.abs(pred.samples.mean(0) - mean) < 5 * se)
    np.testing.assert_allclose(np.cov(pred.samples.T), cov, rtol=0.05, atol=1e-3)


def test_nonspatial_prediction_is_prior():
    d = draws_dict([[1.0, 2.0]], 0.3, 0.8, 1.0)
    pred = predict_theta(d, [[0.1, 0.0]], [[0, 0], [1, 0]], spatial=False)
    assert pred.cond_mean[0, 0] == pytest.approx(0.3) and pred.cond_cov[0, 0, 0] == pytest.approx(0.8)


def test_zero_new_cities_is_noop():
    pred = predict_theta(draws_dict([[1.0]], 0, 1, 1), np.zeros((0, 2)), [[0, 0]])
    assert pred.samples.shape == (1, 0)


def test_prediction_errors():
    d = draws_dict([[1.0, 2.0]], 0, 1, 1)
    with pytest.raises(InputError):
        predict_theta(d, [[0.0, 0.0]], [[0, 0], [1, 0]])
    with pytest.raises(NumericalError) as err:
        predict_theta(draws_dict([[1.0, 2.0, 0.0]], 0, 1, 1), [[9.0, 9.0]], [[0, 0], [5, 5], [0, 0]])
    assert err.value.context["pair"] == [0, 2]
    with pytest.raises(NumericalError):
        conditional_moments(np.zeros(2), 0, 1, np.ones((2, 2)) * 2 - np.eye(2) * 3, np.zeros((1, 2)), np.eye(1))


def test_bounding_box_grid():
    g = bounding_box_grid([[0, 0], [10, 5]], n=3, pad=0.0)
    assert g.shape == (9, 2) and g.min(0).tolist() == [0, 0] and g.max(0).tolist() == [10, 5]


# -- ranks ------------------------------------------------------------------------


def test_point_mass_rank():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(500, 4))
    vals[:, 2] = -100
    r = posterior_ranks(vals)
    assert r.histogram[2, 0] == 500 and r.interval[2].tolist() == [1, 1]


def test_exchangeable_pair_is_half_half():
    rng = np.random.default_rng(1)
    r = posterior_ranks(rng.normal(size=(40000, 2)))
    np.testing.assert_allclose(r.probabilities, 0.5, atol=0.01)


def test_ties_take_minimum_rank_and_are_counted():
    r = posterior_ranks(np.array([[1.0, 1.0, 2.0], [0.0, 1.0, 2.0]]))
    assert r.ranks[0].tolist() == [1, 1, 3]
    assert r.n_tied_draws == 1
    with pytest.raises(InputError):
        posterior_ranks(np.zeros((3, 1)))
    with pytest.raises(InputError):
        posterior_ranks(np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 60), st.integers(0, 2**31))
def test_rank_invariants(n_cities, n_draws, seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(n_draws, n_cities))
    r = posterior_ranks(vals)
    assert abs(r.mean_rank.mean() - (n_cities + 1) / 2) < 1e-12
    # per-draw strictly increasing maps, different for each draw
    a = np.exp(rng.normal(size=(n_draws, 1)))
    b = rng.normal(size=(n_draws, 1))
    for g in (lambda x: a * x + b, lambda x: np.exp(x) * a, lambda x: np.arctan(x) + b):
        assert np.array_equal(posterior_ranks(g(vals)).ranks, r.ranks)
    z = (vals - vals.mean(1, keepdims=True)) / vals.std(1, keepdims=True)
    assert np.array_equal(posterior_ranks(z).ranks, r.ranks)


def test_rank_interval_uses_inverted_cdf():
    vals = np.tile(np.arange(3.0), (40, 1))
    vals[:2] = vals[:2, ::-1]  # 5% of draws reversed
    r = posterior_ranks(vals)
    assert r.interval[0].tolist() == [1, 3]
    assert r.interval[1].tolist() == [2, 2]


def test_city_mean_factor():
    f = np.array([[1.0, 3.0, 2.0, 2.0, 2.0]])
    np.testing.assert_allclose(city_mean_factor(f, [2, 3]), [[2.0, 2.0]])
