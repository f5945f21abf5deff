"""Model variants, parameter containers and closed-form model quantities."""

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateError, InputError

LOG_2PI = math.log(2.0 * math.pi)


class Variant(str, enum.Enum):
    SHFM = "SHFM"
    UHFM_THETA0 = "UHFM_THETA0"
    UHFM = "UHFM"
    ASFM = "ASFM"
    AFM = "AFM"

    @property
    def aggregated(self):
        return self in (Variant.ASFM, Variant.AFM)

    @property
    def spatial_theta(self):
        """City factor has a Matern prior (otherwise H is the identity)."""
        return self in (Variant.SHFM, Variant.ASFM)

    @property
    def within_car(self):
        return self is Variant.SHFM

    @property
    def has_theta(self):
        return self is not Variant.UHFM_THETA0

    @property
    def has_omega(self):
        return not self.aggregated


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    phi: float = None
    lambda2: float = 1.0
    anchor: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.SHFM:
            if self.phi is None or not (np.isfinite(self.phi) and self.phi >= 0):
                raise InputError("SHFM needs a fixed nonnegative phi")
            object.__setattr__(self, "phi", float(self.phi))
        elif self.phi is not None:
            raise InputError(f"phi is only meaningful for SHFM, not {self.variant.value}")
        if not self.lambda2 > 0:
            raise InputError("lambda2 must be positive")
        if self.anchor < 0:
            raise InputError("anchor column must be nonnegative")

    @property
    def label(self):
        if self.variant is Variant.SHFM:
            return f"SHFM(phi={self.phi:g})"
        return self.variant.value


@dataclass(frozen=True, eq=False)
class IndicatorPanel:
    """Tract-by-indicator matrices, one per city."""

    data: list
    indicator_names: tuple = None
    city_names: tuple = None

    def __post_init__(self):
        if len(self.data) < 1:
            raise InputError("panel needs at least one city")
        mats = []
        p = None
        for i, y in enumerate(self.data):
            y = np.array(y, dtype=float, ndmin=2)
            if y.ndim != 2 or y.shape[0] < 1:
                raise InputError(f"city {i}: expected an (n_i, p) matrix with n_i >= 1", city=i)
            if p is None:
                p = y.shape[1]
            elif y.shape[1] != p:
                raise InputError(f"city {i} has {y.shape[1]} indicators, expected {p}", city=i)
            if not np.all(np.isfinite(y)):
                raise InputError(f"city {i} contains non-finite values", city=i)
            y.setflags(write=False)
            mats.append(y)
        object.__setattr__(self, "data", mats)
        names = self.indicator_names
        if names is None:
            names = tuple(f"y{k + 1}" for k in range(p))
        if len(names) != p:
            raise InputError(f"{len(names)} indicator names for {p} columns")
        object.__setattr__(self, "indicator_names", tuple(str(n) for n in names))
        cities = self.city_names
        if cities is None:
            cities = tuple(f"city{i + 1}" for i in range(len(mats)))
        if len(cities) != len(mats):
            raise InputError(f"{len(cities)} city names for {len(mats)} cities")
        object.__setattr__(self, "city_names", tuple(str(c) for c in cities))

    @property
    def p(self):
        return self.data[0].shape[1]

    @property
    def n_cities(self):
        return len(self.data)

    @property
    def sizes(self):
        return [y.shape[0] for y in self.data]

    @property
    def n_obs(self):
        return sum(self.sizes)

    def stacked(self):
        return np.vstack(self.data)

    def city_index(self):
        return np.repeat(np.arange(self.n_cities), self.sizes)


def aggregate_panel(panel):
    """City means of every indicator, shape ``(I, p)``."""
    return np.vstack([y.mean(axis=0) for y in panel.data])


def aggregated_panel(panel):
    """The panel seen by ASFM/AFM: one row per city holding its tract means."""
    means = aggregate_panel(panel)
    return IndicatorPanel([means[i : i + 1] for i in range(panel.n_cities)], panel.indicator_names, panel.city_names)


def zscore_panel(panel):
    y = panel.stacked()
    sd = y.std(axis=0, ddof=1) if y.shape[0] > 1 else np.ones(y.shape[1])
    if np.any(sd == 0):
        raise DegenerateError("cannot z-score a constant indicator")
    z = (y - y.mean(axis=0)) / sd
    bounds = np.cumsum([0] + panel.sizes)
    return IndicatorPanel([z[a:b] for a, b in zip(bounds[:-1], bounds[1:])], panel.indicator_names, panel.city_names)


@dataclass(eq=False)
class ParamState:
    """One complete set of model unknowns.

    ``f`` and ``f_tilde`` are lists with one vector per city. Components a
    variant does not use keep fixed placeholder values (``f_tilde`` zeros,
    ``theta`` zeros for UHFM_THETA0, and so on).
    """

    mu: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray
    f: list
    f_tilde: list
    theta: np.ndarray
    theta0: float
    delta2: float
    tau2: np.ndarray
    omega: np.ndarray
    lambda1: float
    anchor: int = 0

    def copy(self):
        return replace(
            self,
            mu=self.mu.copy(),
            beta=self.beta.copy(),
            sigma2=self.sigma2.copy(),
            f=[v.copy() for v in self.f],
            f_tilde=[v.copy() for v in self.f_tilde],
            theta=self.theta.copy(),
            tau2=self.tau2.copy(),
            omega=self.omega.copy(),
        )

    @property
    def sizes(self):
        return [len(v) for v in self.f]

    def validate(self):
        if self.beta[self.anchor] != 1.0:
            raise InputError(f"anchor loading beta[{self.anchor}] must equal 1")
        for name in ("sigma2", "tau2", "omega"):
            v = getattr(self, name)
            if not np.all(v > 0):
                raise InputError(f"{name} must be positive")
        if not (self.delta2 > 0 and self.lambda1 > 0):
            raise InputError("delta2 and lambda1 must be positive")
        return self


@dataclass(frozen=True)
class ParamLayout:
    """Field order of the flat vector used for draw storage."""

    p: int
    sizes: tuple
    fields: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        n, i, p = sum(self.sizes), len(self.sizes), self.p
        spec = [
            ("mu", p),
            ("beta", p),
            ("sigma2", p),
            ("f", n),
            ("f_tilde", n),
            ("theta", i),
            ("theta0", 1),
            ("delta2", 1),
            ("tau2", i),
            ("omega", i),
            ("lambda1", 1),
        ]
        out, off = [], 0
        for name, size in spec:
            out.append((name, off, size))
            off += size
        object.__setattr__(self, "fields", tuple(out))

    @property
    def width(self):
        name, off, size = self.fields[-1]
        return off + size

    def slice(self, name):
        for nm, off, size in self.fields:
            if nm == name:
                return slice(off, off + size)
        raise KeyError(name)

    def to_vector(self, state):
        out = np.empty(self.width)
        for name, off, size in self.fields:
            val = getattr(state, name)
            if name in ("f", "f_tilde"):
                val = np.concatenate(val)
            out[off : off + size] = val
        return out

    def from_vector(self, vec, anchor=0):
        bounds = np.cumsum((0,) + self.sizes)
        kw = {}
        for name, off, size in self.fields:
            val = np.array(vec[off : off + size], dtype=float)
            if name in ("f", "f_tilde"):
                val = [val[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
            elif size == 1 and name in ("theta0", "delta2", "lambda1"):
                val = float(val[0])
            kw[name] = val
        return ParamState(anchor=anchor, **kw)

    def to_dict(self):
        return {"p": self.p, "sizes": list(self.sizes), "fields": [list(f) for f in self.fields]}


@dataclass
class HyperPriors:
    mu0: np.ndarray
    C_mu: np.ndarray
    beta0: float
    C0: float
    sigma2_shape: np.ndarray
    sigma2_scale: np.ndarray
    omega_shape: np.ndarray
    omega_scale: np.ndarray
    tau2_shape: np.ndarray
    tau2_scale: np.ndarray
    t0: float
    V0: float
    lambda1_shape: float = 2.0
    lambda1_scale: float = float("nan")

    @classmethod
    def default(cls, p, n_cities, city_dist=None, **overrides):
        """Vague proper priors: N(0, 100) locations, IG(2.1, 1.1) variances.

        The lambda1 scale is ``d_max / (-2 log 0.05)``, about d_max / 6, from
        the city distance matrix; at that range the correlation between the
        two farthest cities is about 0.008.
        """
        if city_dist is not None and np.max(city_dist) > 0:
            h = float(np.max(city_dist) / (-2.0 * np.log(0.05)))
        else:
            h = float("nan")
        vals = dict(
            mu0=np.zeros(p),
            C_mu=100.0 * np.eye(p),
            beta0=0.0,
            C0=100.0,
            sigma2_shape=np.full(p, 2.1),
            sigma2_scale=np.full(p, 1.1),
            omega_shape=np.full(n_cities, 2.1),
            omega_scale=np.full(n_cities, 1.1),
            tau2_shape=np.full(n_cities, 2.1),
            tau2_scale=np.full(n_cities, 1.1),
            t0=0.0,
            V0=100.0,
            lambda1_shape=2.0,
            lambda1_scale=h,
        )
        for key, val in overrides.items():
            if key not in vals:
                raise InputError(f"unknown hyperprior {key!r}")
            ref = vals[key]
            if isinstance(ref, np.ndarray):
                arr = np.asarray(val, dtype=float)
                if key == "C_mu" and arr.ndim < 2:
                    arr = np.diag(np.broadcast_to(arr, (p,)).astype(float))
                vals[key] = np.broadcast_to(arr, ref.shape).astype(float).copy()
            else:
                vals[key] = float(val)
        out = cls(**vals)
        out.validate()
        return out

    def validate(self, need_lambda=False):
        for name in ("sigma2_shape", "sigma2_scale", "omega_shape", "omega_scale", "tau2_shape", "tau2_scale"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise InputError(f"hyperprior {name} must be positive")
        if not (self.C0 > 0 and self.V0 > 0 and self.lambda1_shape > 0):
            raise InputError("prior variances and shapes must be positive")
        try:
            np.linalg.cholesky(self.C_mu)
        except np.linalg.LinAlgError:
            raise InputError("C_mu must be positive definite") from None
        if need_lambda and not (self.lambda1_scale > 0):
            raise InputError("lambda1 prior scale must be positive (needs at least two distinct city centroids)")

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _check_dims(state, panel):
    if state.sizes != panel.sizes:
        raise InputError(f"state tract counts {state.sizes} do not match panel {panel.sizes}")
    if len(state.mu) != panel.p or len(state.beta) != panel.p or len(state.sigma2) != panel.p:
        raise InputError(f"state has {len(state.mu)} indicators, panel has {panel.p}")


def observational_loglik(state, panel):
    """Sum over cities, tracts and indicators of log N(y | mu + beta f, sigma2)."""
    _check_dims(state, panel)
    total = 0.0
    s2 = np.asarray(state.sigma2, dtype=float)
    for y, f in zip(panel.data, state.f):
        r = y - state.mu - np.outer(f, state.beta)
        total += -0.5 * np.sum(LOG_2PI + np.log(s2) + r * r / s2)
    return float(total)


def factor_variance(state, cars=None, spec=None):
    """Per-tract Var(f_ij) = delta2 + tau2_i P_i,jj + omega_i, as a list per city.

    Terms absent from the variant are dropped: no CAR term without
    ``cars`` (or outside SHFM), no delta2 for UHFM_THETA0, no omega for the
    aggregated variants.
    """
    variant = spec.variant if spec is not None else Variant.SHFM
    out = []
    for i, n in enumerate(state.sizes):
        v = np.zeros(n)
        if variant.has_theta:
            v += state.delta2
        if cars is not None and variant.within_car:
            v += state.tau2[i] * np.diag(cars[i].P)
        if variant.has_omega:
            v += state.omega[i]
        out.append(v)
    return out


def variance_explained(state, cars, i, j, k, spec=None):
    """Share of Var(y_ijk) carried by the common factor."""
    nu2 = factor_variance(state, cars, spec)[i][j]
    return float(1.0 / (1.0 + state.sigma2[k] / (state.beta[k] ** 2 * nu2)))


def unexplained_fraction(state, cars, i, j, spec=None):
    """Share of Var(f_ij) left to the tract idiosyncrasy omega_i."""
    variant = spec.variant if spec is not None else Variant.SHFM
    if not variant.has_omega:
        raise InputError(f"{variant.value} has no tract-level idiosyncratic term")
    explained = state.delta2 if variant.has_theta else 0.0
    if cars is not None and variant.within_car:
        explained = explained + state.tau2[i] * cars[i].P[j, j]
    return float(1.0 / (1.0 + explained / state.omega[i]))


def _city_fractions(state, cars, spec):
    """Per-city arrays: explained share (n_i, p) and 1 - unexplained (n_i,)."""
    variant = spec.variant if spec is not None else Variant.SHFM
    nu2 = factor_variance(state, cars, spec)
    ratio = state.sigma2 / state.beta**2
    pis, var = [], []
    for i, v in enumerate(nu2):
        pis.append(1.0 / (1.0 + ratio[None, :] / v[:, None]))
        if variant.has_omega:
            var.append(1.0 - state.omega[i] / v)
        else:
            var.append(np.ones_like(v))
    return pis, var


def variance_table(states, cars=None, spec=None, mode="draws"):
    """City averages of the explained shares (one column per indicator) and VAR.

    ``mode="draws"`` averages the per-draw fractions; ``mode="means"``
    plugs posterior means of the variance components into the formulas.
    Returns ``(pi, var)`` with shapes ``(I, p)`` and ``(I,)``.
    """
    states = list(states)
    if not states:
        raise InputError("no draws")
    if mode == "means":
        states = [mean_state(states)]
    elif mode != "draws":
        raise InputError(f"unknown mode {mode!r}")
    n_cities = len(states[0].f)
    p = len(states[0].mu)
    pi = np.zeros((n_cities, p))
    var = np.zeros(n_cities)
    for s in states:
        pis, vs = _city_fractions(s, cars, spec)
        pi += np.vstack([x.mean(axis=0) for x in pis])
        var += np.array([x.mean() for x in vs])
    return pi / len(states), var / len(states)


def mean_state(states):
    states = list(states)
    layout = ParamLayout(len(states[0].mu), states[0].sizes)
    vec = np.mean([layout.to_vector(s) for s in states], axis=0)
    out = layout.from_vector(vec, anchor=states[0].anchor)
    out.beta[out.anchor] = 1.0
    return out


def standardize_index(f_draws, mode="draws"):
    """Global min-max rescaling ``(f - min) / (max - min)`` onto [0, 1].

    ``f_draws`` is ``(n_draws, N)`` (or a single field of length N).
    ``mode="draws"`` rescales every draw by its own extremes; ``mode="mean"``
    rescales the posterior-mean field once.
    """
    arr = np.asarray(f_draws, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if mode == "mean":
        arr = arr.mean(axis=0, keepdims=True)
    elif mode != "draws":
        raise InputError(f"unknown standardization mode {mode!r}")
    lo = arr.min(axis=1, keepdims=True)
    hi = arr.max(axis=1, keepdims=True)
    if np.any(hi == lo):
        raise DegenerateError("cannot standardize a constant field")
    out = (arr - lo) / (hi - lo)
    # exact endpoints regardless of rounding in the division
    rows = np.arange(arr.shape[0])
    out[rows, np.argmax(arr, axis=1)] = 1.0
    out[rows, np.argmin(arr, axis=1)] = 0.0
    if mode == "mean" or np.asarray(f_draws).ndim == 1:
        return out[0]
    return out
