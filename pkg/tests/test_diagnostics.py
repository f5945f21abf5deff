import numpy as np
import pytest

import oracles
from shfm.errors import DegenerateError, InputError
from shfm.diagnostics import convergence_report, gelman_rubin, psrf, standardized_residuals
from shfm.sampler import ChainOutput


def test_psrf_near_one_for_iid_chains():
    rng = np.random.default_rng(0)
    vals = [psrf(rng.normal(size=(4, 2000))) for _ in range(20)]
    assert all(1.0 - 0.01 <= v <= 1.05 for v in vals)
    assert np.median(vals) < 1.01


def test_psrf_detects_shifted_chain():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 1000))
    x[1] += 10.0
    assert psrf(x) > 1.5


def test_psrf_affine_invariant():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 500)) + np.array([[0.0], [0.3], [-0.2]])
    assert psrf(3.7 * x - 12.0) == pytest.approx(psrf(x), rel=1e-10)


def test_psrf_errors():
    with pytest.raises(InputError):
        psrf(np.zeros((1, 100)))
    with pytest.raises(InputError):
        psrf(np.zeros((2, 5)))
    with pytest.raises(DegenerateError):
        psrf(np.ones((2, 100)))
    with pytest.raises(InputError):
        gelman_rubin([np.zeros(20)], lambda c: c)
    with pytest.raises(InputError):
        gelman_rubin([np.zeros(20), np.zeros(30)], lambda c: c)


def _fake_chains(problem, n, shift=0.0, seed=0):
    rng = np.random.default_rng(seed)
    lay = problem.layout
    base = lay.to_vector(oracles.tiny_instance("UHFM", np.random.default_rng(9), n_cities=3)[1])
    chains = []
    for c in range(2):
        d = base + 0.1 * rng.normal(size=(n, lay.width))
        d[:, lay.slice("beta").start] = 1.0
        d[:, lay.slice("mu")] += shift * c
        chains.append(ChainOutput(d, lay, np.empty(0), float("nan"), c))
    return chains


def test_convergence_report_flags_and_skips_anchor():
    problem, _, _ = oracles.tiny_instance("UHFM", np.random.default_rng(9), n_cities=3)
    rep = convergence_report(_fake_chains(problem, 400), "UHFM")
    assert rep["converged"] and "beta[0]" not in rep["psrf"] and "beta[1]" in rep["psrf"]
    assert not any(k.startswith("f[") or k == "f" for k in rep["psrf"])
    bad = convergence_report(_fake_chains(problem, 400, shift=5.0), "UHFM")
    assert not bad["converged"] and {"mu[0]", "mu[1]"} <= set(bad["flagged"])
    with_latent = convergence_report(_fake_chains(problem, 400), "UHFM", include_latent=True)
    assert any(k.startswith("f[") for k in with_latent["psrf"])


def test_standardized_residuals_from_true_parameters():
    rng = np.random.default_rng(3)
    problem, state, _ = oracles.tiny_instance("UHFM", rng, n_cities=3, sizes=[200, 150, 250], p=2)
    lay = problem.layout
    # regenerate Y exactly from the state so that residuals are iid N(0, 1)
    f = np.concatenate(state.f)
    problem.Y = state.mu + np.outer(f, state.beta) + np.sqrt(state.sigma2) * rng.standard_normal(problem.Y.shape)
    draws = np.tile(lay.to_vector(state), (5, 1))
    chain = ChainOutput(draws, lay, np.empty(0), float("nan"), 0)
    out = standardized_residuals([chain], problem)
    n = out["residuals"].size
    assert abs(out["mean"]) < 3 / np.sqrt(n)
    assert out["sd"] == pytest.approx(1.0, abs=0.1)
    qq = out["qq"]
    assert np.all(np.diff(qq[:, 0]) > 0) and np.all(np.diff(qq[:, 1]) >= 0)
