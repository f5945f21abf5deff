"""Spatial covariance structures.

Two structures feed the model:

* a proper CAR precision ``I + phi * M`` inside each city, with
  ``M = D - W`` and inverse-distance neighbour weights between tract
  centroids;
* a Matern correlation matrix between city centroids.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import special

from .errors import InputError, NumericalError

# K_nu(x) underflows double precision beyond this argument.
BESSEL_UNDERFLOW = 700.0


def _as_points(points, name="points"):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.size == 2:
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"{name} must be an (n, 2) array of coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
        raise InputError(f"{name} has a non-finite coordinate at row {bad}", row=bad)
    return pts


def _normalize_edges(edges, n, city=None):
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        raise InputError(f"adjacency index out of range for a city with {n} tracts", city=city)
    if np.any(arr[:, 0] == arr[:, 1]):
        raise InputError("adjacency contains a self-neighbour", city=city)
    arr = np.sort(arr, axis=1)
    arr = np.unique(arr, axis=0) if arr.size else arr
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Geometry:
    """City centroids, tract centroids and within-city neighbour pairs.

    ``adjacency[i]`` is an ``(E_i, 2)`` integer array of unordered tract
    pairs (stored with the smaller index first, duplicates removed).
    """

    city_centroids: np.ndarray
    tract_centroids: list
    adjacency: list
    city_names: tuple = None

    def __post_init__(self):
        cities = _as_points(self.city_centroids, "city_centroids")
        if len(self.tract_centroids) != cities.shape[0]:
            raise InputError(
                f"{cities.shape[0]} city centroids but {len(self.tract_centroids)} tract centroid sets"
            )
        if len(self.adjacency) != cities.shape[0]:
            raise InputError(f"{cities.shape[0]} city centroids but {len(self.adjacency)} adjacency sets")
        tracts, adj = [], []
        for i, (pts, edges) in enumerate(zip(self.tract_centroids, self.adjacency)):
            pts = _as_points(pts, f"tract_centroids[{i}]")
            if pts.shape[0] < 1:
                raise InputError(f"city {i} has no tracts", city=i)
            pts.setflags(write=False)
            tracts.append(pts)
            adj.append(_normalize_edges(edges, pts.shape[0], city=i))
        cities.setflags(write=False)
        object.__setattr__(self, "city_centroids", cities)
        object.__setattr__(self, "tract_centroids", tracts)
        object.__setattr__(self, "adjacency", adj)
        if self.city_names is not None:
            names = tuple(str(n) for n in self.city_names)
            if len(names) != cities.shape[0]:
                raise InputError("city_names length does not match the number of cities")
            object.__setattr__(self, "city_names", names)

    @property
    def n_cities(self):
        return self.city_centroids.shape[0]

    @property
    def sizes(self):
        return [t.shape[0] for t in self.tract_centroids]


@dataclass(frozen=True)
class MaternParams:
    lambda1: float
    lambda2: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and self.lambda1 > 0):
            raise InputError(f"Matern range lambda1 must be positive, got {self.lambda1}")
        if not (np.isfinite(self.lambda2) and self.lambda2 > 0):
            raise InputError(f"Matern smoothness lambda2 must be positive, got {self.lambda2}")


def distance_matrix(points, other=None):
    """Pairwise Euclidean distances (``n x n``, or ``n x m`` against ``other``)."""
    a = _as_points(points)
    b = a if other is None else _as_points(other, "other")
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if other is None:
        np.fill_diagonal(d, 0.0)
        d = 0.5 * (d + d.T)
    return d


def _matern_values(d, lambda1, lambda2):
    x = np.asarray(d, dtype=float) / lambda1
    out = np.zeros_like(x)
    zero = x == 0.0
    out[zero] = 1.0
    mid = ~zero & (x <= BESSEL_UNDERFLOW)
    if np.any(mid):
        xm = x[mid]
        if lambda2 == 1.0:
            out[mid] = xm * special.k1(xm)
        else:
            logc = (1.0 - lambda2) * np.log(2.0) - special.gammaln(lambda2)
            out[mid] = np.exp(logc + lambda2 * np.log(xm)) * special.kv(lambda2, xm)
    return np.minimum(out, 1.0)


def matern_correlation(d, params):
    """Matern correlation ``2^(1-nu)/Gamma(nu) (d/l)^nu K_nu(d/l)``.

    Works elementwise on scalars or arrays. Returns 1 at ``d = 0`` and 0
    once ``d / lambda1`` exceeds the Bessel underflow point.
    """
    if not isinstance(params, MaternParams):
        params = MaternParams(*params)
    arr = np.asarray(d, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise InputError("distances must be finite and nonnegative")
    out = _matern_values(arr, params.lambda1, params.lambda2)
    return float(out) if out.ndim == 0 else out


def city_distances(geometry_or_points):
    pts = geometry_or_points.city_centroids if isinstance(geometry_or_points, Geometry) else geometry_or_points
    return distance_matrix(pts)


def correlation_from_distances(dist, lambda1, lambda2=1.0, cross=False):
    """Matern correlation matrix from a precomputed distance matrix (no checks).

    Self-distance matrices get an exact unit diagonal. Pass ``cross=True``
    for a block between two different point sets, which is left as computed
    even when it happens to be square.
    """
    h = _matern_values(dist, lambda1, lambda2)
    if not cross and h.ndim == 2 and h.shape[0] == h.shape[1]:
        np.fill_diagonal(h, 1.0)
    return h


def _closest_pair(dist):
    d = dist + np.diag(np.full(dist.shape[0], np.inf))
    a, b = np.unravel_index(np.argmin(d), d.shape)
    return int(min(a, b)), int(max(a, b))


def build_between_city_correlation(geometry, params):
    """Matern correlation matrix ``H`` over city centroids.

    Raises :class:`NumericalError` naming the closest pair of cities if
    ``H`` is not positive definite (typically duplicated centroids).
    """
    if not isinstance(params, MaternParams):
        params = MaternParams(*params)
    dist = city_distances(geometry)
    h = correlation_from_distances(dist, params.lambda1, params.lambda2)
    if h.shape[0] > 1:
        pair = _closest_pair(dist)
        if dist[pair] == 0.0:
            raise NumericalError(f"cities {pair[0]} and {pair[1]} share a centroid; H is singular", pair=list(pair))
        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"between-city correlation is not positive definite; closest pair is {pair}", pair=list(pair)
            ) from None
    return h


@dataclass(frozen=True, eq=False)
class CarStructure:
    """Proper CAR structure for one city.

    ``P = (I + phi M)^-1`` is the covariance shape of the within-city
    factor. ``eigvals``/``eigvecs`` diagonalize ``M`` (and hence every
    ``I + phi M``), which the sampler uses for O(n^2) draws.
    """

    W: np.ndarray
    D: np.ndarray
    M: np.ndarray
    phi: float
    P: np.ndarray
    chol: np.ndarray = field(repr=False)
    eigvals: np.ndarray = field(repr=False)
    eigvecs: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.W.shape[0]

    def precision(self):
        return np.eye(self.n) + self.phi * self.M

    def quad_form(self, x):
        """``x' (I + phi M) x``."""
        x = np.asarray(x, dtype=float)
        return float(x @ x + self.phi * (x @ (self.M @ x)))

    def logdet_precision(self):
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def spectrum(self):
        """Eigenvalues of ``I + phi M``."""
        return 1.0 + self.phi * self.eigvals


def neighbour_weights(adjacency, tract_centroids):
    pts = _as_points(tract_centroids, "tract_centroids")
    n = pts.shape[0]
    edges = _normalize_edges(adjacency, n)
    w = np.zeros((n, n))
    if edges.size:
        a, b = edges[:, 0], edges[:, 1]
        d = np.linalg.norm(pts[a] - pts[b], axis=1)
        if np.any(d == 0.0):
            k = int(np.flatnonzero(d == 0.0)[0])
            raise InputError(f"neighbouring tracts {a[k]} and {b[k]} have identical centroids", pair=[int(a[k]), int(b[k])])
        w[a, b] = 1.0 / d
        w[b, a] = 1.0 / d
    return w


def build_car(adjacency, tract_centroids, phi):
    if not (np.isfinite(phi) and phi >= 0):
        raise InputError(f"phi must be finite and nonnegative, got {phi}")
    w = neighbour_weights(adjacency, tract_centroids)
    n = w.shape[0]
    dvec = w.sum(axis=1)
    m = np.diag(dvec) - w
    q = np.eye(n) + phi * m
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        raise NumericalError("CAR precision I + phi*M is not positive definite") from None
    if phi == 0.0:
        p = np.eye(n)
    else:
        p = sla.cho_solve((chol, True), np.eye(n))
        p = 0.5 * (p + p.T)
    evals, evecs = np.linalg.eigh(m)
    evals = np.maximum(evals, 0.0)
    for arr in (w, dvec, m, p, chol, evals, evecs):
        arr.setflags(write=False)
    return CarStructure(W=w, D=dvec, M=m, phi=float(phi), P=p, chol=chol, eigvals=evals, eigvecs=evecs)


def build_cars(geometry, phi):
    return [build_car(adj, pts, phi) for adj, pts in zip(geometry.adjacency, geometry.tract_centroids)]
