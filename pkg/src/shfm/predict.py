"""Kriging of the city factor at new locations, rankings and posterior summaries."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .errors import InputError, NumericalError
from .kernels import correlation_from_distances, distance_matrix
from .model import standardize_index, variance_table


@dataclass
class ThetaPrediction:
    samples: np.ndarray  # (n_draws, U)
    cond_mean: np.ndarray  # (n_draws, U)
    cond_cov: np.ndarray  # (n_draws, U, U)
    centroids: np.ndarray

    @property
    def mean(self):
        return self.samples.mean(axis=0)

    @property
    def sd(self):
        return self.samples.std(axis=0, ddof=1) if self.samples.shape[0] > 1 else np.zeros(self.samples.shape[1])


def conditional_moments(theta_g, theta0, delta2, h_gg, h_ug, h_uu):
    """Mean and covariance of theta_u given theta_g under N(theta0 1, delta2 H)."""
    try:
        chol = np.linalg.cholesky(h_gg)
    except np.linalg.LinAlgError:
        raise NumericalError("observed-city correlation H_gg is singular") from None
    a = sla.cho_solve((chol, True), h_ug.T)  # H_gg^-1 H_gu
    mean = theta0 + a.T @ (theta_g - theta0)
    cov = delta2 * (h_uu - h_ug @ a)
    return mean, 0.5 * (cov + cov.T)


def predict_theta(draws, new_centroids, city_centroids, spatial=True, lambda2=1.0, rng=None):
    """Sample theta at unmeasured cities for every posterior draw.

    ``draws`` is a mapping (or :class:`~shfm.sampler.Fit`) exposing
    ``theta`` ``(S, I)``, ``theta0``, ``delta2`` and ``lambda1`` draws.
    With ``spatial=False`` the prior correlation is the identity, so
    predictions revert to N(theta0, delta2).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    get = draws.param if hasattr(draws, "param") else draws.__getitem__
    theta = np.atleast_2d(np.asarray(get("theta"), dtype=float))
    theta0 = np.asarray(get("theta0"), dtype=float).reshape(-1)
    delta2 = np.asarray(get("delta2"), dtype=float).reshape(-1)
    lam = np.asarray(get("lambda1"), dtype=float).reshape(-1)
    s = theta.shape[0]
    if s == 0:
        raise InputError("no posterior draws")
    g = np.asarray(city_centroids, dtype=float).reshape(-1, 2)
    u = np.asarray(new_centroids, dtype=float).reshape(-1, 2)
    n_u = u.shape[0]
    if n_u == 0:
        empty = np.zeros((s, 0))
        return ThetaPrediction(empty, empty.copy(), np.zeros((s, 0, 0)), u)
    d_ug = distance_matrix(u, g)
    if np.any(d_ug == 0.0):
        a, b = np.argwhere(d_ug == 0.0)[0]
        raise InputError(f"new location {a} coincides with observed city {b}")
    d_gg = distance_matrix(g)
    d_uu = distance_matrix(u)

    samples = np.empty((s, n_u))
    means = np.empty((s, n_u))
    covs = np.empty((s, n_u, n_u))
    for k in range(s):
        if spatial:
            h_gg = correlation_from_distances(d_gg, lam[k], lambda2)
            h_ug = correlation_from_distances(d_ug, lam[k], lambda2, cross=True)
            h_uu = correlation_from_distances(d_uu, lam[k], lambda2)
        else:
            h_gg, h_ug, h_uu = np.eye(g.shape[0]), np.zeros((n_u, g.shape[0])), np.eye(n_u)
        try:
            m, c = conditional_moments(theta[k], theta0[k], delta2[k], h_gg, h_ug, h_uu)
        except NumericalError:
            i, j = np.unravel_index(np.argmin(d_gg + np.diag(np.full(len(g), np.inf))), d_gg.shape)
            raise NumericalError(
                f"H_gg is singular at draw {k}; closest observed cities are {min(i, j)} and {max(i, j)}",
                pair=[int(min(i, j)), int(max(i, j))],
            ) from None
        means[k], covs[k] = m, c
        ev, evec = np.linalg.eigh(c)
        if ev.min() < -1e-10 * max(1.0, abs(ev.max())):
            raise NumericalError(f"conditional covariance is not positive semidefinite at draw {k}")
        samples[k] = m + evec @ (np.sqrt(np.clip(ev, 0.0, None)) * rng.standard_normal(n_u))
    return ThetaPrediction(samples, means, covs, u)


def bounding_box_grid(points, n=20, pad=0.05):
    """Regular ``n x n`` grid over the padded bounding box of ``points``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - pad * span, hi + pad * span
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class RankSummary:
    histogram: np.ndarray  # (I, I): count of draws with city i at rank r+1
    mean_rank: np.ndarray
    interval: np.ndarray  # (I, 2) 95% interval of the rank
    n_tied_draws: int
    ranks: np.ndarray  # (S, I)

    @property
    def probabilities(self):
        return self.histogram / self.histogram.sum(axis=1, keepdims=True)


def city_mean_factor(f_draws, sizes):
    """Average of f over the tracts of each city, per draw."""
    f_draws = np.atleast_2d(f_draws)
    bounds = np.cumsum([0] + list(sizes))
    return np.add.reduceat(f_draws, bounds[:-1], axis=1) / np.asarray(sizes)


def rank_target(fit, target="theta"):
    if target == "theta":
        return fit.param("theta")
    if target == "f-city-mean":
        return city_mean_factor(fit.param("f"), fit.problem.sizes)
    raise InputError(f"unknown ranking target {target!r}")


def posterior_ranks(values):
    """Rank cities within every draw, ascending (rank 1 = least vulnerable).

    Ties inside a draw share the minimum rank.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    s, n = values.shape
    if s == 0:
        raise InputError("no posterior draws")
    if n < 2:
        raise InputError("ranking needs at least two cities")
    ranks = stats.rankdata(values, method="min", axis=1).astype(int)
    tied = int(np.sum([len(np.unique(r)) < n for r in ranks]))
    hist = np.zeros((n, n), dtype=int)
    for i in range(n):
        hist[i] = np.bincount(ranks[:, i] - 1, minlength=n)
    mean_rank = ranks.mean(axis=0)
    interval = np.column_stack(
        [
            np.quantile(ranks, 0.025, axis=0, method="inverted_cdf"),
            np.quantile(ranks, 0.975, axis=0, method="inverted_cdf"),
        ]
    )
    return RankSummary(hist, mean_rank, interval, tied, ranks)


def _standardize_theta(theta, mode):
    if mode == "none":
        return theta
    if mode == "zscore":
        sd = theta.std(axis=1, keepdims=True)
        if np.any(sd == 0):
            return theta - theta.mean(axis=1, keepdims=True)
        return (theta - theta.mean(axis=1, keepdims=True)) / sd
    if mode == "minmax":
        return standardize_index(theta, mode="draws")
    raise InputError(f"unknown theta standardization {mode!r}")


def _summ(x):
    x = np.atleast_2d(x)
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    lo, hi = np.percentile(x, [2.5, 97.5], axis=0)
    return {"mean": x.mean(axis=0), "sd": sd, "q025": lo, "q975": hi}


def summarize_index(fit, theta_mode="zscore", cars=None):
    """Posterior summaries: per-city theta (raw and standardized), per-tract f and kappa, variance tables."""
    problem = fit.problem
    out = {"city_names": list(problem.panel.city_names)}
    theta = fit.param("theta")
    out["theta"] = _summ(theta)
    out["theta_std"] = _summ(_standardize_theta(theta, theta_mode))
    out["theta_mode"] = theta_mode
    f = fit.param("f")
    out["f"] = _summ(f)
    if np.all(f.max(axis=1) > f.min(axis=1)):
        out["kappa"] = _summ(standardize_index(f, mode="draws"))
    cars = cars if cars is not None else problem.cars
    if problem.variant.has_theta or problem.variant.has_omega:
        pi, var = variance_table(fit.states(), cars, problem.spec, mode="draws")
        out["pi"] = pi
        out["var"] = var
    out["city_index"] = problem.cidx
    out["tract_index"] = np.concatenate([np.arange(n) for n in problem.sizes])
    return out
