"""Model comparison criteria: DIC, EPD, CRPS, MAE and MSE (all lower-is-better)."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import InputError

MIN_DIC_DRAWS = 100

CRITERIA = ("dic", "epd", "crps", "mae", "mse")

CONVENTIONS = {
    "dic_focus": "deviance -2 log p(y | mu, beta, f, Sigma); tract factors f count as parameters",
    "epd": "Gelfand-Ghosh quadratic loss, unit weight: sum (y - E y_rep)^2 + sum Var y_rep",
    "crps": "sample-based energy form per cell, summed over cells",
    "mae_mse": "totals over cells of |y - E y_rep| and (y - E y_rep)^2",
    "data_level": "aggregated variants are scored against city means, not tracts",
}


def _draw_matrix(chains):
    if hasattr(chains, "chains"):
        chains = chains.chains
    return np.vstack([c.draws for c in chains]), chains[0].layout


def _unpack(draws, layout):
    return (
        draws[:, layout.slice("mu")],
        draws[:, layout.slice("beta")],
        draws[:, layout.slice("sigma2")],
        draws[:, layout.slice("f")],
    )


def deviance(y, mu, beta, sigma2, f):
    """-2 log-likelihood for each row of parameter draws (2-D inputs) or one draw (1-D)."""
    single = np.ndim(mu) == 1
    mu, beta, sigma2, f = (np.atleast_2d(a) for a in (mu, beta, sigma2, f))
    out = np.empty(mu.shape[0])
    for s in range(mu.shape[0]):
        r = y - mu[s] - np.outer(f[s], beta[s])
        out[s] = np.sum(math.log(2 * math.pi) + np.log(sigma2[s]) + r * r / sigma2[s])
    return float(out[0]) if single else out


def dic(chains, problem):
    """Returns ``(DIC, p_D)`` with ``p_D = mean(D) - D(posterior mean)``."""
    draws, lay = _draw_matrix(chains)
    if draws.shape[0] < MIN_DIC_DRAWS:
        raise InputError(f"DIC needs at least {MIN_DIC_DRAWS} stored draws, got {draws.shape[0]}")
    mu, beta, sigma2, f = _unpack(draws, lay)
    d = deviance(problem.Y, mu, beta, sigma2, f)
    dbar = float(d.mean())
    dhat = deviance(problem.Y, mu.mean(0), beta.mean(0), sigma2.mean(0), f.mean(0))
    p_d = dbar - dhat
    return dbar + p_d, p_d


def predictive_mean(chains, problem):
    draws, lay = _draw_matrix(chains)
    mu, beta, _, f = _unpack(draws, lay)
    # E[mu + beta f] = mean(mu) + mean over draws of outer(f, beta)
    return mu.mean(0) + np.einsum("sn,sk->nk", f, beta) / draws.shape[0]


def _replicate_chunks(chains, problem, rng, rows_per_chunk=64):
    """Yield (row slice, y_rep of shape (S, rows, p)) covering all tracts."""
    draws, lay = _draw_matrix(chains)
    mu, beta, sigma2, f = _unpack(draws, lay)
    sd = np.sqrt(sigma2)
    n = problem.Y.shape[0]
    for a in range(0, n, rows_per_chunk):
        b = min(n, a + rows_per_chunk)
        mean = mu[:, None, :] + f[:, a:b, None] * beta[:, None, :]
        yield slice(a, b), mean + sd[:, None, :] * rng.standard_normal(mean.shape)


def epd(chains, problem, rng=None):
    """Returns ``(EPD, G, P)`` from simulated posterior predictive replicates."""
    rng = rng if rng is not None else np.random.default_rng(0)
    g = pen = 0.0
    for rows, rep in _replicate_chunks(chains, problem, rng):
        y = problem.Y[rows]
        g += float(np.sum((y - rep.mean(axis=0)) ** 2))
        pen += float(np.sum(rep.var(axis=0, ddof=0)))
    return g + pen, g, pen


def crps_gaussian(mean, sd, y):
    """Closed-form CRPS of N(mean, sd^2) at y; reduces to |y - mean| when sd = 0."""
    mean, sd, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mean, sd, y)))
    if np.any(sd < 0):
        raise InputError("sd must be nonnegative")
    scalar = mean.ndim == 0
    mean, sd, y = (np.atleast_1d(a) for a in (mean, sd, y))
    out = np.abs(y - mean)
    pos = sd > 0
    if np.any(pos):
        z = (y[pos] - mean[pos]) / sd[pos]
        out[pos] = sd[pos] * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / math.sqrt(math.pi))
    return float(out[0]) if scalar else out


def crps_sample(samples, y):
    """Energy-form CRPS ``E|X - y| - E|X - X'|/2`` from draws along axis 0."""
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    s = x.shape[0]
    y = np.asarray(y, dtype=float)
    term1 = np.mean(np.abs(x - y), axis=0)
    w = (2 * np.arange(1, s + 1) - s - 1).reshape((-1,) + (1,) * (x.ndim - 1))
    term2 = np.sum(w * x, axis=0) * 2.0 / (s * s)
    out = term1 - 0.5 * term2
    return float(out) if np.ndim(out) == 0 else out


def crps_total(chains, problem, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    total = 0.0
    for rows, rep in _replicate_chunks(chains, problem, rng):
        total += float(np.sum(crps_sample(rep, problem.Y[rows])))
    return total


def mae_mse(chains, problem):
    err = problem.Y - predictive_mean(chains, problem)
    return float(np.sum(np.abs(err))), float(np.sum(err * err))


@dataclass
class CriteriaReport:
    rows: list
    best: dict = field(default_factory=dict)
    ties: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def table(self):
        out = []
        for row in self.rows:
            r = dict(row)
            for c in CRITERIA:
                r[f"best_{c}"] = row["model"] in self.best.get(c, [])
            out.append(r)
        return out


def criteria_row(fit, label=None, rng=None):
    """All five criteria for one fitted model, sharing one replicate stream."""
    rng = rng if rng is not None else np.random.default_rng(0)
    problem = fit.problem
    dval, p_d = dic(fit, problem)
    g = pen = crps = 0.0
    for rows, rep in _replicate_chunks(fit, problem, rng):
        y = problem.Y[rows]
        g += float(np.sum((y - rep.mean(axis=0)) ** 2))
        pen += float(np.sum(rep.var(axis=0)))
        crps += float(np.sum(crps_sample(rep, y)))
    mae, mse = mae_mse(fit, problem)
    return {
        "model": label or problem.label,
        "data_level": "city-means" if problem.variant.aggregated else "tracts",
        "dic": dval,
        "p_d": p_d,
        "p_d_negative": p_d < 0,
        "epd": g + pen,
        "epd_g": g,
        "epd_p": pen,
        "crps": crps,
        "mae": mae,
        "mse": mse,
    }


def compare(rows):
    """Flag the minimum of every criterion; ties flag every tied model."""
    rows = list(rows)
    if len(rows) < 2:
        raise InputError("comparison needs at least two models")
    best, ties = {}, {}
    for c in CRITERIA:
        vals = np.array([r[c] for r in rows], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise InputError(f"criterion {c} has non-finite entries")
        winners = [r["model"] for r, v in zip(rows, vals) if v == vals.min()]
        best[c] = winners
        ties[c] = len(winners) > 1
    return CriteriaReport(rows, best, ties)
