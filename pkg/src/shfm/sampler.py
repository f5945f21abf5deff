"""Blocked Gibbs sampler with a Metropolis-Hastings step for the Matern range.

A sweep updates, in order::

    mu, beta, sigma2, f, (theta, f_tilde), theta0, delta2, tau2, omega,
    lambda1, location shift

``theta`` is drawn with ``f_tilde`` integrated out and ``f_tilde`` is then
drawn given ``theta``, which is one exact draw of the pair. The closing
location shift moves ``(mu, f, theta, theta0)`` jointly along the direction
the likelihood cannot see (``mu - beta c``, everything else ``+ c``); its
conditional is Gaussian in ``c``.

Within a city every ``I + phi M`` shares the eigenvectors of ``M``, so the
within-city draws use one block-diagonal orthogonal basis computed up front.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import special

from .errors import InputError, NumericalError
from .kernels import build_cars, city_distances, correlation_from_distances
from .model import (
    LOG_2PI,
    HyperPriors,
    ParamLayout,
    ParamState,
    Variant,
    aggregated_panel,
)

log = logging.getLogger(__name__)

BLOCKS = ("mu", "beta", "sigma2", "f", "theta_ftilde", "theta0", "delta2", "tau2", "omega")


@dataclass
class McmcConfig:
    n_iter: int = 30000
    burn_in: int = 10000
    thin: int = 5
    n_chains: int = 2
    seed: int = 0
    mh_step_scale: float = 0.3
    adapt: bool = True
    adapt_window: int = 50
    target_accept: tuple = (0.30, 0.45)

    def __post_init__(self):
        if not (0 <= self.burn_in < self.n_iter):
            raise InputError(f"need 0 <= burn_in < n_iter, got {self.burn_in}, {self.n_iter}")
        if self.thin < 1 or self.n_chains < 1:
            raise InputError("thin and n_chains must be >= 1")
        if not self.mh_step_scale > 0:
            raise InputError("mh_step_scale must be positive")

    @property
    def n_draws(self):
        return (self.n_iter - self.burn_in) // self.thin


def _blockdiag(mats):
    return sp.block_diag(mats, format="csr") if mats else sp.csr_matrix((0, 0))


class Problem:
    """Data, model choice, priors and every structure precomputed from them.

    Aggregated variants replace the panel by its city means on construction.
    """

    def __init__(self, panel, spec, geometry=None, hyper=None):
        self.spec = spec
        self.variant = spec.variant
        self.tract_panel = panel
        self.panel = aggregated_panel(panel) if spec.variant.aggregated else panel
        self.geometry = geometry
        p, n_cities = self.panel.p, self.panel.n_cities
        if spec.anchor >= p:
            raise InputError(f"anchor column {spec.anchor} out of range for {p} indicators")
        self.p = p
        self.n_cities = n_cities
        self.sizes = self.panel.sizes
        self.n_obs = self.panel.n_obs
        self.Y = self.panel.stacked()
        self.cidx = self.panel.city_index()
        self.bounds = np.cumsum([0] + self.sizes)
        self.layout = ParamLayout(p, self.sizes)

        needs_geo = spec.variant.spatial_theta or spec.variant.within_car
        if needs_geo and geometry is None:
            raise InputError(f"{spec.variant.value} needs a geometry")
        if geometry is not None and geometry.n_cities != n_cities:
            raise InputError(f"geometry has {geometry.n_cities} cities, panel has {n_cities}")
        self.city_dist = city_distances(geometry) if geometry is not None else None
        if hyper is None:
            hyper = HyperPriors.default(p, n_cities, self.city_dist)
        hyper.validate(need_lambda=spec.variant.spatial_theta)
        self.hyper = hyper
        self.Cmu_inv = np.linalg.inv(hyper.C_mu)
        self.Cmu_inv_mu0 = self.Cmu_inv @ hyper.mu0
        self.Cmu_logdet = float(np.linalg.slogdet(hyper.C_mu)[1])

        self.cars = None
        if spec.variant.within_car:
            if geometry.sizes != self.sizes:
                raise InputError(f"geometry tract counts {geometry.sizes} do not match panel {self.sizes}")
            self.cars = build_cars(geometry, spec.phi)
            self.V = _blockdiag([c.eigvecs for c in self.cars])
            self.Vt = self.V.T.tocsr()
            self.M = _blockdiag([sp.csr_matrix(c.M) for c in self.cars])
            # eigenvalues of I + phi M, stacked over cities
            self.car_eig = np.concatenate([c.spectrum() for c in self.cars])
            self.v1 = self.Vt @ np.ones(self.n_obs)
            self.car_logdet = np.array([np.sum(np.log(c.spectrum())) for c in self.cars])

    @property
    def label(self):
        return self.spec.label

    def city_sum(self, x):
        return np.bincount(self.cidx, weights=x, minlength=self.n_cities)

    def correlation(self, lambda1):
        if not self.variant.spatial_theta:
            return np.eye(self.n_cities)
        return correlation_from_distances(self.city_dist, lambda1, self.spec.lambda2)


prepare = Problem


@dataclass
class _HCache:
    lambda1: float
    H: np.ndarray
    chol: np.ndarray
    inv: np.ndarray
    logdet: float

    @property
    def inv1(self):
        return self.inv.sum(axis=1)


def _h_cache(problem, lambda1):
    h = problem.correlation(lambda1)
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise NumericalError(f"H(lambda1={lambda1:g}) is not positive definite", block="lambda1") from None
    inv = sla.cho_solve((chol, True), np.eye(h.shape[0]))
    return _HCache(lambda1, h, chol, inv, float(2.0 * np.sum(np.log(np.diag(chol)))))


@dataclass
class Work:
    """Flat working copy of a :class:`ParamState` plus the H factorization."""

    mu: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    f: np.ndarray
    ft: np.ndarray
    theta: np.ndarray
    theta0: float
    delta2: float
    tau2: np.ndarray
    omega: np.ndarray
    lambda1: float
    hc: _HCache = field(default=None, repr=False)


def to_work(state, problem):
    w = Work(
        mu=np.array(state.mu, dtype=float),
        beta=np.array(state.beta, dtype=float),
        sigma2=np.array(state.sigma2, dtype=float),
        f=np.concatenate(state.f).astype(float),
        ft=np.concatenate(state.f_tilde).astype(float),
        theta=np.array(state.theta, dtype=float),
        theta0=float(state.theta0),
        delta2=float(state.delta2),
        tau2=np.array(state.tau2, dtype=float),
        omega=np.array(state.omega, dtype=float),
        lambda1=float(state.lambda1),
    )
    if len(w.f) != problem.n_obs or len(w.mu) != problem.p or len(w.theta) != problem.n_cities:
        raise InputError("state dimensions do not match the problem")
    w.hc = _h_cache(problem, w.lambda1)
    return w


def to_vector(w):
    return np.concatenate(
        [w.mu, w.beta, w.sigma2, w.f, w.ft, w.theta, [w.theta0, w.delta2], w.tau2, w.omega, [w.lambda1]]
    )


def to_state(w, problem):
    return problem.layout.from_vector(to_vector(w), anchor=problem.spec.anchor)


def _mvn_draw(prec, lin, rng, block):
    """Draw from N(prec^-1 lin, prec^-1)."""
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NumericalError(f"conditional precision of {block} is not positive definite", block=block) from None
    mean = sla.cho_solve((chol, True), lin)
    z = rng.standard_normal(len(lin))
    return mean + sla.solve_triangular(chol.T, z, lower=False)


def _mvn_logpdf_prec(x, prec, lin):
    chol = np.linalg.cholesky(prec)
    mean = sla.cho_solve((chol, True), lin)
    r = chol.T @ (x - mean)
    return float(-0.5 * len(x) * LOG_2PI + np.sum(np.log(np.diag(chol))) - 0.5 * r @ r)


def _norm_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


_VAR_FLOOR = np.finfo(float).tiny


def _invgamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def _invgamma_draw(shape, scale, rng, block=None):
    x = scale / rng.gamma(shape)
    arr = np.atleast_1d(x)
    ok = np.isfinite(arr) & (arr >= _VAR_FLOOR)
    if not ok.all():
        # the 1/delta2 prior is improper at zero, so delta2 can drift there
        bad = float(arr[~ok][0])
        raise NumericalError(f"{block} draw degenerated to {bad:g}; the chain collapsed onto a zero variance",
                             block=block, value=bad)
    return x


# --- full conditionals -------------------------------------------------------
# Each returns the natural parameters the draw uses; block_logpdf reuses them.


def _tract_mean(w, problem):
    """Prior mean of each f_ij given the city-level terms."""
    v = problem.variant
    if v.aggregated or not v.has_theta:
        return np.zeros(problem.n_obs)
    m = w.theta[problem.cidx]
    if v.within_car:
        m = m + w.ft
    return m


def cond_mu(w, problem):
    r = problem.Y - np.outer(w.f, w.beta)
    prec = problem.Cmu_inv + np.diag(problem.n_obs / w.sigma2)
    lin = problem.Cmu_inv_mu0 + r.sum(axis=0) / w.sigma2
    return prec, lin


def cond_beta(w, problem):
    """Independent Gaussians for the free loadings (anchor excluded)."""
    h = problem.hyper
    free = np.arange(problem.p) != problem.spec.anchor
    prec = 1.0 / h.C0 + (w.f @ w.f) / w.sigma2
    lin = h.beta0 / h.C0 + (w.f @ (problem.Y - w.mu)) / w.sigma2
    return free, prec, lin


def cond_sigma2(w, problem):
    h = problem.hyper
    r = problem.Y - w.mu - np.outer(w.f, w.beta)
    return h.sigma2_shape + 0.5 * problem.n_obs, h.sigma2_scale + 0.5 * np.sum(r * r, axis=0)


def cond_f(w, problem):
    """Independent Gaussian per tract (diagonal precision within each city)."""
    bs = w.beta / w.sigma2
    lin = (problem.Y - w.mu) @ bs
    prec = np.full(problem.n_obs, w.beta @ bs)
    if not problem.variant.aggregated:
        om = w.omega[problem.cidx]
        prec = prec + 1.0 / om
        lin = lin + _tract_mean(w, problem) / om
    return prec, lin


def cond_theta(w, problem):
    """Gaussian for theta with f_tilde integrated out: (precision, linear term)."""
    hc = w.hc
    prior_prec = hc.inv / w.delta2
    lin = hc.inv1 * (w.theta0 / w.delta2)
    v = problem.variant
    if v.aggregated:
        bs = w.beta / w.sigma2
        a = np.full(problem.n_cities, w.beta @ bs)
        b = (problem.Y - w.mu) @ bs
    elif v.within_car:
        s = w.tau2[problem.cidx] / problem.car_eig + w.omega[problem.cidx]
        z = problem.Vt @ w.f
        a = problem.city_sum(problem.v1**2 / s)
        b = problem.city_sum(problem.v1 * z / s)
    else:
        a = np.asarray(problem.sizes, dtype=float) / w.omega
        b = problem.city_sum(w.f) / w.omega
    return prior_prec + np.diag(a), lin + b


def cond_ftilde(w, problem):
    """Independent Gaussian coordinates in the CAR eigenbasis: (precision, mean)."""
    om = w.omega[problem.cidx]
    q = problem.car_eig / w.tau2[problem.cidx] + 1.0 / om
    z = problem.Vt @ ((w.f - w.theta[problem.cidx]) / om)
    return q, z / q


def cond_theta0(w, problem):
    h = problem.hyper
    inv1 = w.hc.inv1
    prec = 1.0 / h.V0 + inv1.sum() / w.delta2
    lin = h.t0 / h.V0 + (inv1 @ w.theta) / w.delta2
    return prec, lin


def cond_delta2(w, problem):
    r = w.theta - w.theta0
    return 0.5 * problem.n_cities, 0.5 * float(r @ w.hc.inv @ r)


def cond_tau2(w, problem):
    h = problem.hyper
    quad = problem.city_sum(w.ft * w.ft + problem.spec.phi * w.ft * (problem.M @ w.ft))
    return h.tau2_shape + 0.5 * np.asarray(problem.sizes), h.tau2_scale + 0.5 * quad


def cond_omega(w, problem):
    h = problem.hyper
    r = w.f - _tract_mean(w, problem)
    return h.omega_shape + 0.5 * np.asarray(problem.sizes), h.omega_scale + 0.5 * problem.city_sum(r * r)


def cond_shift(w, problem):
    h = problem.hyper
    cb = problem.Cmu_inv @ w.beta
    prec = w.beta @ cb + 1.0 / h.V0
    lin = cb @ (w.mu - h.mu0) + (h.t0 - w.theta0) / h.V0
    return prec, lin


def apply_shift(w, c):
    w.mu = w.mu - w.beta * c
    w.f = w.f + c
    w.theta = w.theta + c
    w.theta0 = w.theta0 + c


def active_blocks(variant):
    v = Variant(variant)
    if v is Variant.UHFM_THETA0:
        return ("mu", "beta", "sigma2", "f", "omega")
    if v.aggregated:
        return ("mu", "beta", "sigma2", "theta", "theta0", "delta2")
    out = ["mu", "beta", "sigma2", "f", "theta_ftilde", "theta0", "delta2"]
    if v.within_car:
        out.append("tau2")
    out.append("omega")
    return tuple(out)


def active_parameters(variant):
    """ParamState fields the sampler moves for this variant."""
    v = Variant(variant)
    out = ["mu", "beta", "sigma2"]
    if not v.aggregated:
        out.append("f")
    if v.within_car:
        out.append("f_tilde")
    if v.has_theta:
        out += ["theta", "theta0", "delta2"]
    if v.within_car:
        out.append("tau2")
    if v.has_omega:
        out.append("omega")
    if v.spatial_theta:
        out.append("lambda1")
    return tuple(out)


def block_logpdf(block, w, problem):
    """Log density of ``block``'s full conditional at its current value in ``w``."""
    if block == "mu":
        prec, lin = cond_mu(w, problem)
        return _mvn_logpdf_prec(w.mu, prec, lin)
    if block == "beta":
        free, prec, lin = cond_beta(w, problem)
        return float(np.sum(_norm_logpdf(w.beta[free], lin[free] / prec[free], 1.0 / prec[free])))
    if block == "sigma2":
        a, b = cond_sigma2(w, problem)
        return float(np.sum(_invgamma_logpdf(w.sigma2, a, b)))
    if block == "f":
        prec, lin = cond_f(w, problem)
        return float(np.sum(_norm_logpdf(w.f, lin / prec, 1.0 / prec)))
    if block == "theta":
        prec, lin = cond_theta(w, problem)
        return _mvn_logpdf_prec(w.theta, prec, lin)
    if block == "theta_ftilde":
        prec, lin = cond_theta(w, problem)
        out = _mvn_logpdf_prec(w.theta, prec, lin)
        if problem.variant.within_car:
            q, m = cond_ftilde(w, problem)
            e = problem.Vt @ w.ft
            out += float(np.sum(_norm_logpdf(e, m, 1.0 / q)))
        return out
    if block == "theta0":
        prec, lin = cond_theta0(w, problem)
        return float(_norm_logpdf(w.theta0, lin / prec, 1.0 / prec))
    if block == "delta2":
        a, b = cond_delta2(w, problem)
        return float(_invgamma_logpdf(w.delta2, a, b))
    if block == "tau2":
        a, b = cond_tau2(w, problem)
        return float(np.sum(_invgamma_logpdf(w.tau2, a, b)))
    if block == "omega":
        a, b = cond_omega(w, problem)
        return float(np.sum(_invgamma_logpdf(w.omega, a, b)))
    raise KeyError(block)


# --- draws ------------------------------------------------------------------


def draw_block(block, w, problem, rng):
    if block == "mu":
        prec, lin = cond_mu(w, problem)
        w.mu = _mvn_draw(prec, lin, rng, "mu")
    elif block == "beta":
        free, prec, lin = cond_beta(w, problem)
        z = rng.standard_normal(problem.p)
        beta = lin / prec + z / np.sqrt(prec)
        beta[~free] = 1.0
        w.beta = beta
    elif block == "sigma2":
        a, b = cond_sigma2(w, problem)
        w.sigma2 = _invgamma_draw(a, b, rng, block)
    elif block == "f":
        prec, lin = cond_f(w, problem)
        w.f = lin / prec + rng.standard_normal(problem.n_obs) / np.sqrt(prec)
    elif block in ("theta", "theta_ftilde"):
        prec, lin = cond_theta(w, problem)
        w.theta = _mvn_draw(prec, lin, rng, "theta")
        if problem.variant.aggregated:
            w.f = w.theta.copy()
        elif problem.variant.within_car:
            q, m = cond_ftilde(w, problem)
            e = m + rng.standard_normal(problem.n_obs) / np.sqrt(q)
            w.ft = problem.V @ e
    elif block == "theta0":
        prec, lin = cond_theta0(w, problem)
        w.theta0 = float(lin / prec + rng.standard_normal() / math.sqrt(prec))
    elif block == "delta2":
        a, b = cond_delta2(w, problem)
        w.delta2 = float(_invgamma_draw(a, b, rng, block))
    elif block == "tau2":
        a, b = cond_tau2(w, problem)
        w.tau2 = _invgamma_draw(a, b, rng, block)
    elif block == "omega":
        a, b = cond_omega(w, problem)
        w.omega = _invgamma_draw(a, b, rng, block)
    else:
        raise KeyError(block)


def draw_shift(w, problem, rng):
    prec, lin = cond_shift(w, problem)
    c = lin / prec + rng.standard_normal() / math.sqrt(prec)
    apply_shift(w, c)
    if problem.variant.aggregated:
        w.f = w.theta.copy()
    return c


# --- lambda1 -----------------------------------------------------------------


def lambda1_log_target(w, problem, hc):
    """log N(theta | theta0 1, delta2 H(lambda1)) + log IG(lambda1 | shape, scale)."""
    h = problem.hyper
    r = w.theta - w.theta0
    quad = float(r @ hc.inv @ r)
    n = problem.n_cities
    dens = -0.5 * (n * LOG_2PI + n * math.log(w.delta2) + hc.logdet + quad / w.delta2)
    return dens + float(_invgamma_logpdf(hc.lambda1, h.lambda1_shape, h.lambda1_scale))


def lambda1_log_accept_ratio(w, problem, hc_new):
    """Log MH ratio for a random walk on log(lambda1), Jacobian included."""
    return (
        lambda1_log_target(w, problem, hc_new)
        - lambda1_log_target(w, problem, w.hc)
        + math.log(hc_new.lambda1)
        - math.log(w.hc.lambda1)
    )


def mh_update_lambda1(w, problem, rng, step):
    """One random-walk MH step on log(lambda1). Returns (accepted, singular)."""
    prop = w.lambda1 * math.exp(step * rng.standard_normal())
    u = rng.random()
    try:
        hc_new = _h_cache(problem, prop)
    except NumericalError:
        return False, True
    if math.log(u) < lambda1_log_accept_ratio(w, problem, hc_new):
        w.lambda1 = prop
        w.hc = hc_new
        return True, False
    return False, False


# --- log posterior -----------------------------------------------------------


def log_posterior_terms(w, problem):
    """Unnormalized log posterior split by factor."""
    if not isinstance(w, Work):
        w = to_work(w, problem)
    h = problem.hyper
    v = problem.variant
    for name in ("sigma2", "tau2", "omega"):
        if not np.all(getattr(w, name) > 0):
            raise InputError(f"{name} must be positive")
    if not (w.delta2 > 0 and w.lambda1 > 0):
        raise InputError("delta2 and lambda1 must be positive")

    r = problem.Y - w.mu - np.outer(w.f, w.beta)
    terms = {"likelihood": float(-0.5 * np.sum(LOG_2PI + np.log(w.sigma2) + r * r / w.sigma2))}
    if not v.aggregated:
        om = w.omega[problem.cidx]
        terms["f"] = float(np.sum(_norm_logpdf(w.f, _tract_mean(w, problem), om)))
    if v.within_car:
        quad = problem.city_sum(w.ft * w.ft + problem.spec.phi * w.ft * (problem.M @ w.ft))
        n = np.asarray(problem.sizes)
        terms["f_tilde"] = float(
            np.sum(-0.5 * n * (LOG_2PI + np.log(w.tau2)) + 0.5 * problem.car_logdet - 0.5 * quad / w.tau2)
        )
    if v.has_theta:
        rt = w.theta - w.theta0
        n = problem.n_cities
        terms["theta"] = float(
            -0.5 * (n * LOG_2PI + n * math.log(w.delta2) + w.hc.logdet + rt @ w.hc.inv @ rt / w.delta2)
        )
    dm = w.mu - h.mu0
    terms["prior_mu"] = float(
        -0.5 * (problem.p * LOG_2PI + problem.Cmu_logdet + dm @ problem.Cmu_inv @ dm)
    )
    free = np.arange(problem.p) != problem.spec.anchor
    terms["prior_beta"] = float(np.sum(_norm_logpdf(w.beta[free], h.beta0, h.C0)))
    terms["prior_sigma2"] = float(np.sum(_invgamma_logpdf(w.sigma2, h.sigma2_shape, h.sigma2_scale)))
    if v.has_omega:
        terms["prior_omega"] = float(np.sum(_invgamma_logpdf(w.omega, h.omega_shape, h.omega_scale)))
    if v.within_car:
        terms["prior_tau2"] = float(np.sum(_invgamma_logpdf(w.tau2, h.tau2_shape, h.tau2_scale)))
    if v.has_theta:
        terms["prior_theta0"] = float(_norm_logpdf(w.theta0, h.t0, h.V0))
        terms["prior_delta2"] = -math.log(w.delta2)
    if v.spatial_theta:
        terms["prior_lambda1"] = float(_invgamma_logpdf(w.lambda1, h.lambda1_shape, h.lambda1_scale))
    return terms


def log_posterior(state, problem):
    return float(sum(log_posterior_terms(state, problem).values()))


# --- sweeps and chains -------------------------------------------------------


def sweep(w, problem, rng, step=0.3):
    """One full scan in place. Returns the lambda1 acceptance flag (or None)."""
    for block in active_blocks(problem.variant):
        draw_block(block, w, problem, rng)
    accepted = None
    if problem.variant.spatial_theta:
        accepted, _ = mh_update_lambda1(w, problem, rng, step)
    if problem.variant.has_theta:
        draw_shift(w, problem, rng)
    return accepted


def gibbs_sweep(state, problem, rng, step=0.3):
    """Functional wrapper: returns a new ParamState after one sweep."""
    w = to_work(state, problem)
    sweep(w, problem, rng, step)
    return to_state(w, problem)


def initial_state(problem, chain_id=0, rng=None):
    """Data-driven start for chain 0; overdispersed perturbation of it otherwise."""
    Y, v = problem.Y, problem.variant
    a = problem.spec.anchor
    mu = Y.mean(axis=0)
    x = Y[:, a] - mu[a]
    sxx = float(x @ x)
    beta = (x @ (Y - mu)) / sxx if sxx > 0 else np.ones(problem.p)
    beta[a] = 1.0
    resid = Y - mu - np.outer(x, beta)
    floor = 0.1 * np.maximum(Y.var(axis=0), 1e-8)
    sigma2 = np.maximum(resid.var(axis=0), floor)
    sizes = np.asarray(problem.sizes, dtype=float)
    city_mean = problem.city_sum(x) / sizes
    within = problem.city_sum((x - city_mean[problem.cidx]) ** 2) / sizes
    within = np.maximum(within, 0.05)

    n_cities = problem.n_cities
    theta = city_mean.copy() if v.has_theta else np.zeros(n_cities)
    theta0 = float(theta.mean()) if v.has_theta else 0.0
    delta2 = float(max(theta.var(), 0.1)) if v.has_theta else 1.0
    if v.within_car:
        omega, tau2 = 0.5 * within, 0.5 * within
    else:
        omega, tau2 = within, np.ones(n_cities)
    if v.aggregated:
        omega = np.ones(n_cities)
    h = problem.hyper.lambda1_scale
    lambda1 = float(h) if (v.spatial_theta and h > 0) else 1.0
    f = x.copy()
    ft = np.zeros(problem.n_obs)

    if chain_id > 0:
        if rng is None:
            raise InputError("overdispersed starts need an rng")
        jitter = lambda size: rng.normal(0.0, 2.0, size)
        scale = lambda size: np.exp(rng.standard_normal(size))
        mu = mu + jitter(problem.p)
        # loadings are scaled, not shifted: a sign flip lands in a mirrored local mode
        beta = beta * scale(problem.p) ** 0.5
        beta[a] = 1.0
        sigma2 = sigma2 * scale(problem.p)
        shift = jitter(n_cities)
        if v.has_theta:
            theta = theta + shift
            theta0 = theta0 + float(jitter(1)[0])
            delta2 = delta2 * float(scale(1)[0])
        if v.has_omega:
            omega = omega * scale(n_cities)
        if v.within_car:
            tau2 = tau2 * scale(n_cities)
        if v.spatial_theta:
            lambda1 = lambda1 * float(scale(1)[0])
        # tract factors move with their city; independent noise on f would
        # erase the sign information the loadings are learned from
        f = f + shift[problem.cidx]
    if v.aggregated:
        f = theta.copy()

    w = Work(mu, beta, sigma2, f, ft, theta, theta0, delta2, tau2, omega, lambda1)
    w.hc = _h_cache(problem, lambda1)
    return to_state(w, problem)


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws as rows of a flat matrix (see ParamLayout)."""

    draws: np.ndarray
    layout: ParamLayout
    logpost_trace: np.ndarray
    acceptance_rate_lambda1: float
    chain_id: int
    anchor: int = 0
    mh_step_scale: float = None
    n_singular: int = 0

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def param(self, name):
        """Draws of one field, shape ``(n_draws, size)``."""
        return self.draws[:, self.layout.slice(name)]

    def state(self, k):
        return self.layout.from_vector(self.draws[k], anchor=self.anchor)

    def states(self):
        for k in range(self.n_draws):
            yield self.state(k)


def _chain_rng(seed, chain_id):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(chain_id)]))


def run_chain(problem, config, chain_id=0, init=None, record_logpost=True):
    """Run one chain; reproducible from ``(config.seed, chain_id)``."""
    v = problem.variant
    if v in (Variant.SHFM, Variant.ASFM) and problem.n_cities < 3:
        raise InputError(f"{v.value} needs at least 3 cities for a proper delta2 posterior")
    rng = _chain_rng(config.seed, chain_id)
    state = init if init is not None else initial_state(problem, chain_id, rng)
    w = to_work(state, problem)
    n_draws = config.n_draws
    out = np.empty((n_draws, problem.layout.width))
    trace = np.empty(config.n_iter) if record_logpost else np.empty(0)
    step = config.mh_step_scale
    n_acc = n_tot = win_acc = win_tot = n_sing = 0
    k = 0
    for t in range(1, config.n_iter + 1):
        try:
            for block in active_blocks(v):
                draw_block(block, w, problem, rng)
            if v.spatial_theta:
                acc, sing = mh_update_lambda1(w, problem, rng, step)
                n_sing += sing
                if t > config.burn_in:
                    n_acc += acc
                    n_tot += 1
                else:
                    win_acc += acc
                    win_tot += 1
                    if config.adapt and win_tot == config.adapt_window:
                        rate = win_acc / win_tot
                        lo, hi = config.target_accept
                        if rate < lo:
                            step *= 0.8
                        elif rate > hi:
                            step *= 1.25
                        win_acc = win_tot = 0
            if v.has_theta:
                draw_shift(w, problem, rng)
        except NumericalError as err:
            err.context["iteration"] = t
            err.context["chain_id"] = chain_id
            raise NumericalError(f"{err} at iteration {t} of chain {chain_id}", **err.context) from err
        if record_logpost:
            trace[t - 1] = sum(log_posterior_terms(w, problem).values())
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0 and k < n_draws:
            out[k] = to_vector(w)
            k += 1
    rate = n_acc / n_tot if n_tot else float("nan")
    return ChainOutput(
        draws=out,
        layout=problem.layout,
        logpost_trace=trace,
        acceptance_rate_lambda1=rate,
        chain_id=chain_id,
        anchor=problem.spec.anchor,
        mh_step_scale=step,
        n_singular=n_sing,
    )


def _run_chain_job(args):
    problem, config, chain_id, record = args
    return run_chain(problem, config, chain_id, record_logpost=record)


def run_chains(problem, config, threads=1, record_logpost=True):
    jobs = [(problem, config, c, record_logpost) for c in range(config.n_chains)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            return list(pool.map(_run_chain_job, jobs))
    return [_run_chain_job(j) for j in jobs]


@dataclass
class Fit:
    problem: Problem
    chains: list
    config: McmcConfig

    @property
    def spec(self):
        return self.problem.spec

    def param(self, name):
        """Pooled draws of one field across chains."""
        return np.vstack([c.param(name) for c in self.chains])

    def states(self):
        for c in self.chains:
            yield from c.states()


def fit(panel, spec, geometry=None, config=None, hyper=None, threads=1, record_logpost=True):
    config = config or McmcConfig()
    problem = Problem(panel, spec, geometry, hyper)
    log.info("fitting %s: %d cities, %d tracts, p=%d", spec.label, problem.n_cities, problem.n_obs, problem.p)
    chains = run_chains(problem, config, threads, record_logpost)
    return Fit(problem, chains, config)
