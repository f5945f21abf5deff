import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from shfm.errors import InputError, NumericalError
from shfm.kernels import (
    Geometry,
    MaternParams,
    build_between_city_correlation,
    build_car,
    correlation_from_distances,
    distance_matrix,
    matern_correlation,
)


def test_distance_matrix_small_cases():
    assert distance_matrix([(0, 0)]).tolist() == [[0.0]]
    assert distance_matrix([(0, 0), (3, 4)]).tolist() == [[0.0, 5.0], [5.0, 0.0]]


def test_distance_matrix_matches_double_loop():
    pts = np.random.default_rng(0).normal(size=(10, 2)) * 5
    np.testing.assert_allclose(distance_matrix(pts), oracles.pairwise_loop(pts), rtol=0, atol=1e-12)


def test_distance_matrix_rejects_nonfinite():
    with pytest.raises(InputError):
        distance_matrix([(0, 0), (np.nan, 1)])


def test_k1_at_one():
    assert oracles.bessel_k_quad(1, 1.0) == pytest.approx(0.6019072, abs=1e-7)
    assert matern_correlation(2.5, MaternParams(2.5)) == pytest.approx(oracles.bessel_k_quad(1, 1.0), rel=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.0, 1.5, 2.5])
def test_matern_matches_quadrature(nu):
    for x in np.geomspace(0.01, 20, 25):
        got = matern_correlation(x * 3.0, MaternParams(3.0, nu))
        assert got == pytest.approx(oracles.matern_quad(x * 3.0, 3.0, nu), rel=1e-8)


def test_matern_limits():
    assert matern_correlation(0.0, MaternParams(7.0)) == 1.0
    assert matern_correlation(100.0, MaternParams(1.0)) < 1e-10
    assert matern_correlation(1e6, MaternParams(1.0)) == 0.0
    with pytest.raises(InputError):
        matern_correlation(-1.0, MaternParams(1.0))
    with pytest.raises(InputError):
        MaternParams(0.0)
    with pytest.raises(InputError):
        MaternParams(1.0, -2.0)


def test_matern_monotone_on_grid():
    d = np.linspace(0, 50, 2001)
    r = matern_correlation(d, MaternParams(4.0))
    assert np.all(np.diff(r) <= 0)


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(1.01, 3))
def test_offdiagonal_increases_with_range(d, lam, factor):
    a = matern_correlation(d, MaternParams(lam))
    b = matern_correlation(d, MaternParams(lam * factor))
    assert b > a or a == 1.0 or b == 0.0 and a == 0.0


def test_between_city_correlation():
    one = Geometry([(0, 0)], [np.zeros((1, 2))], [[]])
    assert build_between_city_correlation(one, MaternParams(1.0)).tolist() == [[1.0]]
    two = Geometry([(0, 0), (3, 4)], [np.zeros((1, 2)), np.ones((1, 2))], [[], []])
    h = build_between_city_correlation(two, MaternParams(5.0))
    assert h[0, 1] == pytest.approx(0.6019072, abs=1e-7)
    assert h[0, 0] == 1.0 and h[0, 1] == h[1, 0]


def test_between_city_correlation_pd_and_rigid_motion():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 10, size=(5, 2))
    geo = Geometry(pts, [np.zeros((1, 2))] * 5, [[]] * 5)
    h = build_between_city_correlation(geo, MaternParams(4.0))
    np.linalg.cholesky(h)
    a = 0.7
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    moved = Geometry(pts @ rot.T + [100.0, -40.0], [np.zeros((1, 2))] * 5, [[]] * 5)
    np.testing.assert_allclose(build_between_city_correlation(moved, MaternParams(4.0)), h, atol=1e-12)


def test_duplicate_city_centroids_name_the_pair():
    geo = Geometry([(0, 0), (5, 5), (0, 0)], [np.zeros((1, 2))] * 3, [[]] * 3)
    with pytest.raises(NumericalError) as err:
        build_between_city_correlation(geo, MaternParams(1.0))
    assert err.value.context["pair"] == [0, 2]


def test_cross_correlation_block_keeps_its_diagonal():
    d = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    h = correlation_from_distances(d, 2.0)
    np.testing.assert_allclose(h, matern_correlation(d, MaternParams(2.0)))
    sq = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert correlation_from_distances(sq, 2.0)[0, 0] == 1.0
    np.testing.assert_allclose(correlation_from_distances(sq, 2.0, cross=True), matern_correlation(sq, MaternParams(2.0)))


def test_car_two_tracts_analytic():
    car = build_car([(0, 1)], [(0, 0), (2, 0)], phi=1.0)
    np.testing.assert_allclose(car.W, [[0, 0.5], [0.5, 0]])
    np.testing.assert_allclose(car.M, [[0.5, -0.5], [-0.5, 0.5]])
    np.testing.assert_allclose(car.P, [[0.75, 0.25], [0.25, 0.75]], atol=1e-15)


def test_car_phi_zero_is_identity_exactly():
    pts = np.random.default_rng(1).normal(size=(6, 2))
    car = build_car([(0, 1), (1, 2), (3, 4)], pts, phi=0.0)
    assert np.array_equal(car.P, np.eye(6))


def test_car_matches_loop_oracle_and_invariants():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(20, 2)) * 3
    edges = [(i, j) for i in range(20) for j in range(i + 1, 20) if rng.random() < 0.2]
    car = build_car(edges, pts, phi=5.0)
    w, m, p = oracles.car_dense(pts, edges, 5.0)
    np.testing.assert_allclose(car.W, w, atol=1e-14)
    np.testing.assert_allclose(car.P, p, atol=1e-10)
    np.testing.assert_allclose(car.P @ car.precision(), np.eye(20), atol=1e-10)
    assert np.array_equal(car.W, car.W.T) and np.all(np.diag(car.W) == 0)
    np.testing.assert_allclose(car.M.sum(axis=1), 0.0, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(car.precision())) >= 1 - 1e-10
    np.testing.assert_allclose(car.spectrum(), np.sort(np.linalg.eigvalsh(car.precision())), atol=1e-10)
    x = rng.normal(size=20)
    assert car.quad_form(x) == pytest.approx(x @ car.precision() @ x)
    assert car.logdet_precision() == pytest.approx(np.linalg.slogdet(car.precision())[1])


def test_car_isolated_tract_keeps_unit_variance():
    car = build_car([(0, 1)], [(0, 0), (1, 0), (5, 5)], phi=3.0)
    assert car.P[2, 2] == pytest.approx(1.0)
    assert car.P[2, 0] == 0.0


def test_car_errors():
    with pytest.raises(InputError):
        build_car([(0, 1)], [(0, 0), (0, 0)], phi=1.0)
    with pytest.raises(InputError):
        build_car([(0, 5)], [(0, 0), (1, 0)], phi=1.0)
    with pytest.raises(InputError):
        build_car([(1, 1)], [(0, 0), (1, 0)], phi=1.0)
    with pytest.raises(InputError):
        build_car([], [(0, 0)], phi=-1.0)


def test_geometry_normalizes_edges():
    geo = Geometry([(0, 0)], [np.zeros((3, 2)) + [[0, 0], [1, 0], [2, 0]]], [[(1, 0), (0, 1), (2, 1)]])
    assert geo.adjacency[0].tolist() == [[0, 1], [1, 2]]
    assert geo.sizes == [3]
    with pytest.raises(InputError):
        Geometry([(0, 0), (1, 1)], [np.zeros((1, 2))], [[]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 15), st.sampled_from([0.0, 1.0, 5.0, 7.0]), st.integers(0, 2**31))
def test_car_inverse_property(n, phi, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2)) * 4
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    car = build_car(edges, pts, phi)
    np.testing.assert_allclose(car.P @ car.precision(), np.eye(n), atol=1e-10)
    assert np.all(np.diag(car.chol) >= 1.0 - 1e-12)
