"""Command-line entry point: ``shfm {fit,compare,predict,rank,simulate}``.

Each subcommand reads a flat TOML config (every key optional on the command
line too) and writes its artifacts under ``--out``. Exit codes: 0 on
success, 1 on numerical failure, 2 on invalid input. Errors are reported as
one JSON object on stderr.
"""

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import io
from .diagnostics import convergence_report
from .errors import DegenerateError, InputError, NumericalError, ShfmError
from .kernels import city_distances
from .model import HyperPriors, ModelSpec, Variant, zscore_panel
from .predict import bounding_box_grid, city_mean_factor, posterior_ranks, predict_theta, summarize_index
from .sampler import McmcConfig, fit
from .select import compare, criteria_row

log = logging.getLogger("shfm")

PRIOR_PREFIX = "prior_"


@dataclass
class RunConfig:
    variant: str = "SHFM"
    variants: list = field(default_factory=lambda: ["UHFM", "SHFM"])
    phi: list = field(default_factory=lambda: [1.0, 5.0, 7.0])
    lambda2: float = 1.0
    anchor: int = 0
    panel_dir: str = None
    adjacency_dir: str = None
    city_centroids: str = None
    tract_centroid_dir: str = None
    header: str = "auto"
    standardize: bool = False
    # MCMC
    n_iter: int = 30000
    burn_in: int = 10000
    thin: int = 5
    n_chains: int = 2
    mh_step_scale: float = 0.3
    seed: int = 0
    # predict / rank
    draws_dir: str = None
    new_centroids: str = None
    grid_n: int = 20
    rank_target: str = "theta"
    theta_mode: str = "zscore"
    psrf_threshold: float = 1.1
    # simulate
    sim_variant: str = "SHFM"
    preset: str = "spatial-strong"
    n_cities: int = 10
    tracts_min: int = 5
    tracts_max: int = 40
    big_city: int = 200
    p: int = 5
    priors: dict = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, data, base=None):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kw = dataclasses.asdict(base) if base is not None else {}
        priors = dict(kw.get("priors", {}))
        for key, val in data.items():
            if key.startswith(PRIOR_PREFIX):
                priors[key[len(PRIOR_PREFIX) :]] = val
            elif key == "priors":
                if not isinstance(val, dict):
                    raise InputError("priors must be a table")
                priors.update(val)
            elif key in known:
                kw[key] = val
            else:
                raise InputError(f"unknown config key {key!r}", key=key)
        kw["priors"] = priors
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if isinstance(self.phi, (int, float)):
            self.phi = [float(self.phi)]
        if isinstance(self.variants, str):
            self.variants = [self.variants]
        for name in [self.variant, self.sim_variant, *self.variants]:
            try:
                Variant(name)
            except ValueError:
                raise InputError(f"unknown model variant {name!r}; choose from {[v.value for v in Variant]}") from None
        if not self.phi or any(not (np.isfinite(x) and x >= 0) for x in self.phi):
            raise InputError("phi grid must be a nonempty list of nonnegative numbers")
        for key in ("n_iter", "burn_in", "thin", "n_chains", "grid_n", "n_cities", "p"):
            if not isinstance(getattr(self, key), int) or isinstance(getattr(self, key), bool):
                raise InputError(f"{key} must be an integer", key=key)
        self.mcmc()
        return self

    def mcmc(self):
        return McmcConfig(
            n_iter=self.n_iter,
            burn_in=self.burn_in,
            thin=self.thin,
            n_chains=self.n_chains,
            seed=self.seed,
            mh_step_scale=self.mh_step_scale,
        )

    def specs(self, variants=None):
        out = []
        for name in variants or [self.variant]:
            v = Variant(name)
            if v is Variant.SHFM:
                out += [ModelSpec(v, phi=x, lambda2=self.lambda2, anchor=self.anchor) for x in self.phi]
            else:
                out.append(ModelSpec(v, lambda2=self.lambda2, anchor=self.anchor))
        return out

    def to_dict(self):
        return dataclasses.asdict(self)


def load_config(path=None, overrides=None):
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file {path} not found", path=str(path)) from None
        except tomli.TOMLDecodeError as err:
            raise InputError(f"config file {path} is not valid TOML: {err}", path=str(path)) from None
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_mapping(data)


def _provenance(cfg):
    return {"config_hash": io.config_hash(cfg.to_dict()), "seed": cfg.seed}


def _load_data(cfg, spec_variants):
    if cfg.panel_dir is None:
        raise InputError("panel_dir is required")
    panel = io.load_panel(cfg.panel_dir, header=cfg.header)
    if cfg.standardize:
        panel = zscore_panel(panel)
    needs_geo = any(Variant(v).spatial_theta or Variant(v).within_car for v in spec_variants)
    needs_car = any(Variant(v).within_car for v in spec_variants)
    if needs_car and cfg.adjacency_dir is None:
        raise InputError("SHFM needs adjacency_dir")
    if needs_car and cfg.adjacency_dir is not None and not Path(cfg.adjacency_dir).is_dir():
        raise InputError(f"adjacency directory {cfg.adjacency_dir} does not exist", path=str(cfg.adjacency_dir))
    if needs_car and cfg.tract_centroid_dir is None:
        raise InputError("SHFM needs tract_centroid_dir for the CAR weights")
    geometry = None
    if needs_geo or cfg.city_centroids is not None:
        geometry = io.load_geometry(panel, cfg.adjacency_dir, cfg.city_centroids, cfg.tract_centroid_dir)
    return panel, geometry


def _fit_one(cfg, panel, geometry, spec, threads):
    hyper = None
    if cfg.priors:
        dist = city_distances(geometry) if geometry is not None else None
        hyper = HyperPriors.default(panel.p, panel.n_cities, dist, **cfg.priors)
    return fit(panel, spec, geometry, cfg.mcmc(), hyper=hyper, threads=threads)


def _summary_tables(res, theta_mode):
    s = summarize_index(res, theta_mode=theta_mode)
    names = s["city_names"]
    city_rows = []
    for i, name in enumerate(names):
        row = {"city": name}
        for key in ("theta", "theta_std"):
            for stat in ("mean", "sd", "q025", "q975"):
                row[f"{key}_{stat}"] = s[key][stat][i]
        city_rows.append(row)
    tract_rows = []
    for j in range(len(s["f"]["mean"])):
        i = int(s["city_index"][j])
        row = {"city": names[i], "tract": int(s["tract_index"][j])}
        for stat in ("mean", "sd", "q025", "q975"):
            row[f"f_{stat}"] = s["f"][stat][j]
        if "kappa" in s:
            for stat in ("mean", "sd", "q025", "q975"):
                row[f"kappa_{stat}"] = s["kappa"][stat][j]
        tract_rows.append(row)
    return city_rows, tract_rows, s


def _geometry_meta(geometry):
    if geometry is None:
        return None
    return {"city_centroids": geometry.city_centroids, "city_names": list(geometry.city_names or [])}


def cmd_fit(cfg, out, threads=1):
    panel, geometry = _load_data(cfg, [cfg.variant])
    specs = cfg.specs()
    if len(specs) != 1:
        raise InputError(f"fit takes a single phi value, got {cfg.phi}; set e.g. phi = [5.0] or use compare")
    spec = specs[0]
    res = _fit_one(cfg, panel, geometry, spec, threads)
    prov = _provenance(cfg)
    out = Path(out)
    io.save_chains(
        out / "chains",
        res.chains,
        prov,
        extra={
            "variant": spec.variant.value,
            "phi": spec.phi,
            "lambda2": spec.lambda2,
            "city_names": list(panel.city_names),
            "indicator_names": list(panel.indicator_names),
            "city_ordering": "lexicographic by file name",
            "mcmc": dataclasses.asdict(res.config),
            "geometry": _geometry_meta(geometry),
        },
    )
    report = _convergence(res, cfg.psrf_threshold)
    io.write_json(out / "convergence.json", report, prov)
    city_rows, tract_rows, s = _summary_tables(res, cfg.theta_mode)
    io.write_csv(out / "cities.csv", city_rows, prov)
    io.write_csv(out / "tracts.csv", tract_rows, prov)
    if "pi" in s:
        io.write_json(out / "variance.json", {"pi": s["pi"], "var": s["var"]}, prov)
    return {"convergence_warning": report["warning"], "out": str(out)}


def _convergence(res, threshold):
    if len(res.chains) < 2:
        return {"psrf": {}, "flagged": [], "converged": None, "warning": True, "threshold": threshold,
                "note": "one chain: psrf needs at least two"}
    rep = convergence_report(res.chains, res.problem.variant, threshold=threshold)
    rep["warning"] = not rep["converged"]
    rep["acceptance_rate_lambda1"] = [c.acceptance_rate_lambda1 for c in res.chains]
    return rep


def cmd_compare(cfg, out, threads=1):
    panel, geometry = _load_data(cfg, cfg.variants)
    rows, warnings = [], {}
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    for spec in cfg.specs(cfg.variants):
        res = _fit_one(cfg, panel, geometry, spec, threads)
        rows.append(criteria_row(res, spec.label, rng))
        warnings[spec.label] = _convergence(res, cfg.psrf_threshold)["warning"]
    report = compare(rows) if len(rows) > 1 else None
    prov = _provenance(cfg)
    out = Path(out)
    table = report.table() if report else rows
    for r in table:
        r["convergence_warning"] = warnings[r["model"]]
    io.write_csv(out / "criteria.csv", table, prov)
    io.write_json(
        out / "criteria.json",
        {
            "rows": table,
            "best": report.best if report else {},
            "ties": report.ties if report else {},
            "conventions": report.conventions if report else {},
            "lower_is_better": True,
        },
        prov,
    )
    return {"convergence_warning": any(warnings.values()), "out": str(out)}


class _StoredFit:
    """Draws loaded from a fit directory, exposing ``param`` like a live fit."""

    def __init__(self, chains, schema):
        self.chains = chains
        self.schema = schema

    def param(self, name):
        return np.vstack([c.param(name) for c in self.chains])


def _draws_for(cfg, out, threads):
    if cfg.draws_dir is not None:
        chains, schema = io.load_chains(cfg.draws_dir)
        return _StoredFit(chains, schema)
    info = cmd_fit(cfg, Path(out) / "fit", threads)
    chains, schema = io.load_chains(Path(info["out"]) / "chains")
    return _StoredFit(chains, schema)


def cmd_predict(cfg, out, threads=1):
    res = _draws_for(cfg, out, threads)
    geo = res.schema.get("geometry")
    if not geo:
        raise InputError("stored fit has no city centroids; prediction needs a spatial fit")
    variant = Variant(res.schema["variant"])
    if not variant.has_theta:
        raise InputError(f"{variant.value} has no city factor to predict")
    cities = np.asarray(geo["city_centroids"], dtype=float)
    if cfg.new_centroids is not None:
        ids, pts = io.load_centroids(cfg.new_centroids)
    else:
        pts = bounding_box_grid(cities, n=cfg.grid_n)
        ids = [str(k) for k in range(pts.shape[0])]
    # grid nodes can land on an observed centroid; drop them rather than fail
    keep = np.ones(len(pts), bool) if cfg.new_centroids is not None else ~np.any(
        np.all(pts[:, None, :] == cities[None, :, :], axis=2), axis=1
    )
    ids = [i for i, k in zip(ids, keep) if k]
    pts = pts[keep]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    pred = predict_theta(res, pts, cities, spatial=variant.spatial_theta, lambda2=res.schema["lambda2"], rng=rng)
    rows = [
        {"id": i, "x": x, "y": y, "mean": m, "sd": s}
        for i, (x, y), m, s in zip(ids, pts, pred.mean, pred.sd)
    ]
    prov = _provenance(cfg)
    io.write_csv(Path(out) / "theta_surface.csv", rows, prov)
    return {"out": str(out), "n_locations": len(rows)}


def cmd_rank(cfg, out, threads=1):
    res = _draws_for(cfg, out, threads)
    names = res.schema["city_names"]
    if cfg.rank_target == "theta":
        values = res.param("theta")
    elif cfg.rank_target == "f-city-mean":

        values = city_mean_factor(res.param("f"), res.schema["layout"]["sizes"])
    else:
        raise InputError(f"unknown ranking target {cfg.rank_target!r}")
    r = posterior_ranks(values)
    prov = _provenance(cfg)
    hist_rows = []
    for i, name in enumerate(names):
        for k in range(len(names)):
            hist_rows.append(
                {"city": name, "rank": k + 1, "count": int(r.histogram[i, k]), "probability": r.probabilities[i, k]}
            )
    io.write_csv(Path(out) / "rank_histogram.csv", hist_rows, prov)
    summary = [
        {"city": n, "mean_rank": m, "rank_q025": int(a), "rank_q975": int(b)}
        for n, m, (a, b) in zip(names, r.mean_rank, r.interval)
    ]
    io.write_csv(Path(out) / "ranks.csv", summary, prov)
    io.write_json(
        Path(out) / "ranks.json",
        {"target": cfg.rank_target, "order": "ascending, rank 1 = lowest value",
         "ties": "minimum rank", "n_tied_draws": r.n_tied_draws, "cities": summary},
        prov,
    )
    return {"out": str(out)}


def cmd_simulate(cfg, out, threads=1):
    from .synth import preset_params, random_geometry, simulate_dataset, study_sizes

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    sizes = study_sizes(cfg.n_cities, cfg.tracts_min, cfg.tracts_max, cfg.big_city, rng)
    geometry = random_geometry(cfg.n_cities, rng=rng, sizes=sizes)
    truth, phi = preset_params(cfg.preset, cfg.p, sizes)
    variant = Variant(cfg.sim_variant)
    spec = ModelSpec(variant, phi=phi if variant is Variant.SHFM else None, lambda2=cfg.lambda2)
    sim = simulate_dataset(spec, truth, geometry, rng)
    out = Path(out)
    # always write tract-level data; aggregated truths still describe city means
    io.write_panel(sim.panel, out / "panel")
    paths = io.write_geometry(geometry, out / "geometry")
    prov = _provenance(cfg)
    t = sim.truth
    io.write_json(
        out / "truth.json",
        {
            "variant": variant.value,
            "phi": phi,
            "preset": cfg.preset,
            "sizes": list(map(int, sizes)),
            "mu": t.mu, "beta": t.beta, "sigma2": t.sigma2, "theta": t.theta, "theta0": t.theta0,
            "delta2": t.delta2, "tau2": t.tau2, "omega": t.omega, "lambda1": t.lambda1,
            "f": [x for x in t.f], "f_tilde": [x for x in t.f_tilde],
        },
        prov,
    )
    fit_toml = "\n".join(
        [
            f'variant = "{variant.value}"',
            f"phi = [{phi!r}]",
            f'panel_dir = "{(out / "panel").resolve()}"',
            f'adjacency_dir = "{paths["adjacency"].resolve()}"',
            f'city_centroids = "{paths["cities"].resolve()}"',
            f'tract_centroid_dir = "{paths["tracts"].resolve()}"',
            "",
        ]
    )
    (out / "fit.toml").write_text(fit_toml)
    return {"out": str(out)}


COMMANDS = {"fit": cmd_fit, "compare": cmd_compare, "predict": cmd_predict, "rank": cmd_rank, "simulate": cmd_simulate}


def build_parser():
    ap = argparse.ArgumentParser(prog="shfm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as TOML)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _parse_sets(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        try:
            out.update(tomli.loads(f"{key.strip()} = {val}"))
        except tomli.TOMLDecodeError:
            out[key.strip()] = val
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = _parse_sets(args.set)
        overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        result = COMMANDS[args.command](cfg, args.out, threads=args.threads)
    except NumericalError as err:
        print(json.dumps({**io._jsonable(err.to_dict()), "exit_code": 1}), file=sys.stderr)
        return 1
    except (InputError, DegenerateError) as err:
        print(json.dumps({**io._jsonable(err.to_dict()), "exit_code": 2}), file=sys.stderr)
        return 2
    except ShfmError as err:
        print(json.dumps({**io._jsonable(err.to_dict()), "exit_code": 1}), file=sys.stderr)
        return 1
    if result.get("convergence_warning"):
        log.warning("some parameters have psrf above the threshold; see the convergence report")
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
