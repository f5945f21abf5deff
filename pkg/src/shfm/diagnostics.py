"""Convergence and goodness-of-fit diagnostics for chain output."""

import numpy as np
from scipy import stats

from .errors import DegenerateError, InputError
from .model import Variant
from .sampler import active_parameters

PSRF_THRESHOLD = 1.1
POSITIVE = {"sigma2", "delta2", "tau2", "omega", "lambda1"}
# per-tract fields are latent and left out of the default report
LATENT = {"f", "f_tilde"}


def psrf(sequences):
    """Brooks-Gelman corrected potential scale reduction factor.

    ``sequences`` is ``(m, n)``: m chains of n draws of one scalar. Uses
    ``V = (n-1)/n W + (1 + 1/m) B/n`` and the degrees-of-freedom correction
    ``(d + 3)/(d + 1)`` with ``d = 2 V^2 / var(V)``.
    """
    x = np.asarray(sequences, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("need at least two chains")
    m, n = x.shape
    if n < 10:
        raise InputError("need at least 10 draws per chain")
    means = x.mean(axis=1)
    s2 = x.var(axis=1, ddof=1)
    w = s2.mean()
    if w == 0:
        raise DegenerateError("zero within-chain variance")
    b = n * means.var(ddof=1)
    v = (n - 1) / n * w + (m + 1) / (m * n) * b
    gm = means.mean()
    cov1 = np.cov(s2, means**2)[0, 1]
    cov2 = np.cov(s2, means)[0, 1]
    var_v = (
        ((n - 1) / n) ** 2 / m * s2.var(ddof=1)
        + ((m + 1) / (m * n)) ** 2 * 2.0 / (m - 1) * b**2
        + 2.0 * (m + 1) * (n - 1) / (m * n * n) * (n / m) * (cov1 - 2.0 * gm * cov2)
    )
    d = 2.0 * v**2 / var_v if var_v > 0 else np.inf
    corr = (d + 3.0) / (d + 1.0) if np.isfinite(d) else 1.0
    return float(np.sqrt(corr * v / w))


def gelman_rubin(chains, extractor):
    """PSRF for the scalar ``extractor(chain) -> (n_draws,)`` across chains."""
    if len(chains) < 2:
        raise InputError("need at least two chains")
    seqs = [np.asarray(extractor(c), dtype=float).reshape(-1) for c in chains]
    if len({len(s) for s in seqs}) != 1:
        raise InputError("chains must have equal length")
    return psrf(np.vstack(seqs))


def convergence_report(chains, variant, threshold=PSRF_THRESHOLD, include_latent=False):
    """PSRF for every active scalar parameter (log scale for variances).

    Returns ``{"psrf": {name: value}, "flagged": [...], "converged": bool}``.
    Parameters with zero within-chain variance are reported as NaN and
    flagged.
    """
    variant = Variant(variant)
    names = [n for n in active_parameters(variant) if include_latent or n not in LATENT]
    anchor = chains[0].anchor
    out = {}
    for name in names:
        draws = np.stack([c.param(name) for c in chains])  # (m, n, size)
        if name in POSITIVE:
            draws = np.log(draws)
        for j in range(draws.shape[2]):
            if name == "beta" and j == anchor:
                continue
            key = name if draws.shape[2] == 1 else f"{name}[{j}]"
            try:
                out[key] = psrf(draws[:, :, j])
            except DegenerateError:
                out[key] = float("nan")
    flagged = [k for k, v in out.items() if not (v <= threshold)]
    return {"psrf": out, "flagged": flagged, "converged": not flagged, "threshold": threshold}


def standardized_residuals(chains, problem):
    """Residuals ``(y - mu - beta f) / sigma`` at posterior means, with Q-Q pairs.

    Returns a dict with ``residuals`` (N, p) and ``qq`` (N*p, 2) holding
    (theoretical, empirical) quantiles, both sorted.
    """
    draws = np.vstack([c.draws for c in chains])
    lay = problem.layout
    mean = draws.mean(axis=0)
    mu = mean[lay.slice("mu")]
    beta = mean[lay.slice("beta")]
    sigma = np.sqrt(mean[lay.slice("sigma2")])
    f = mean[lay.slice("f")]
    r = (problem.Y - mu - np.outer(f, beta)) / sigma
    emp = np.sort(r.ravel())
    n = emp.size
    theo = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return {"residuals": r, "qq": np.column_stack([theo, emp]), "mean": float(r.mean()), "sd": float(r.std())}
