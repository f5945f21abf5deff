"""Text loaders, the binary draw store and table/metadata writers.

Directory conventions (one file per city, matched by file stem):

* panel directory: ``<city>.txt`` / ``.csv`` with one row per tract and one
  column per indicator, optionally preceded by a header of indicator names;
* adjacency directory: ``<city>.txt`` holding either an ``n x n`` 0/1 matrix
  or a two-column list of 0-based tract index pairs;
* tract centroid directory: ``<city>.txt`` with ``id x y`` rows in panel row
  order; the city centroid file has ``name x y`` rows.

Cities are always ordered lexicographically by file name. Fields may be
separated by commas or whitespace; the choice is made per file.
"""

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .kernels import Geometry
from .model import IndicatorPanel, ParamLayout

TEXT_SUFFIXES = (".txt", ".csv", ".dat", ".tsv")
DRAWS_FILE = "draws.bin"
TRACE_FILE = "logpost.bin"
SCHEMA_FILE = "draws.json"


def _is_number(tok):
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _split(line, comma):
    if comma:
        return [t.strip() for t in line.split(",")]
    return line.split()


def read_table(path, header="auto"):
    """Parse a delimited numeric text file.

    Returns ``(values, names)`` where ``names`` is the header row or None.
    ``header`` is ``"auto"`` (a first row with no numeric cell is a header),
    True or False. Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise InputError(f"cannot read {path}: {err.strerror}", path=str(path)) from None
    comma = "," in text
    rows, names, width = [], None, None
    first = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = _split(line, comma)
        if first:
            first = False
            numeric = [_is_number(t) for t in toks]
            is_header = header is True or (header == "auto" and not any(numeric))
            if is_header:
                names = toks
                width = len(toks)
                continue
        if width is None:
            width = len(toks)
        if len(toks) != width:
            raise ParseError(f"ragged row: expected {width} fields, found {len(toks)}", path, lineno)
        vals = []
        for col, tok in enumerate(toks, start=1):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(f"non-numeric cell {tok!r}", path, lineno, col) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite cell {tok!r}", path, lineno, col)
            vals.append(v)
        rows.append(vals)
    if not rows:
        return np.zeros((0, width or 0)), names
    return np.array(rows, dtype=float), names


def _city_files(directory, what):
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{what} directory {d} does not exist", path=str(d))
    files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in TEXT_SUFFIXES)
    if not files:
        raise InputError(f"{what} directory {d} has no data files", path=str(d))
    stems = [f.stem for f in files]
    dup = {s for s in stems if stems.count(s) > 1}
    if dup:
        raise InputError(f"{what} directory has several files for city {sorted(dup)[0]!r}", path=str(d))
    return files


def load_panel(directory, header="auto"):
    """One city per file, cities sorted by file name."""
    files = _city_files(directory, "panel")
    data, names, p = [], None, None
    for f in files:
        y, hdr = read_table(f, header)
        if y.shape[0] == 0:
            raise ParseError("city file has no data rows", f)
        if p is None:
            p = y.shape[1]
        elif y.shape[1] != p:
            raise ParseError(f"{y.shape[1]} indicators, other cities have {p}", f)
        if hdr is not None:
            if names is None:
                names = tuple(hdr)
            elif tuple(hdr) != names:
                raise ParseError("header differs from the first city's header", f, 1)
        data.append(y)
    return IndicatorPanel(data, indicator_names=names, city_names=[f.stem for f in files])


def _fmt(x):
    return repr(float(x))


def write_panel(panel, directory):
    """Write one CSV per city with an indicator header; floats use repr so values round-trip."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, y in zip(panel.city_names, panel.data):
        path = d / f"{name}.csv"
        lines = [",".join(panel.indicator_names)]
        lines += [",".join(_fmt(v) for v in row) for row in y]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def parse_adjacency(values, n, path=None):
    """Edges from a 0/1 matrix (when the shape is ``n x n``) or an index-pair list."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    # a 2-tract city's 2x2 input reads the same either way unless the diagonal is set
    if a.shape == (n, n) and (n != 2 or np.all(np.diag(a) == 0)):
        if not np.all((a == 0) | (a == 1)):
            raise ParseError("adjacency matrix entries must be 0 or 1", path)
        if not np.array_equal(a, a.T):
            i, j = np.argwhere(a != a.T)[0]
            raise ParseError(f"adjacency matrix is not symmetric at ({i}, {j})", path, int(i) + 1, int(j) + 1)
        if np.any(np.diag(a) != 0):
            raise ParseError("adjacency matrix has a nonzero diagonal", path)
        i, j = np.nonzero(np.triu(a, 1))
        return np.column_stack([i, j]).astype(np.int64)
    if a.shape[1] != 2:
        raise ParseError(f"expected an {n}x{n} 0/1 matrix or a two-column edge list, got shape {a.shape}", path)
    if not np.all(a == np.round(a)):
        raise ParseError("edge list entries must be integers", path)
    e = a.astype(np.int64)
    bad = np.flatnonzero((e < 0).any(axis=1) | (e >= n).any(axis=1))
    if bad.size:
        raise ParseError(f"tract index out of range for a city with {n} tracts", path, int(bad[0]) + 1)
    loops = np.flatnonzero(e[:, 0] == e[:, 1])
    if loops.size:
        raise ParseError("edge list contains a self-neighbour", path, int(loops[0]) + 1)
    return np.unique(np.sort(e, axis=1), axis=0)


def load_adjacency(directory, sizes, city_names=None):
    """Per-city edge arrays; ``city_names`` (if given) must match the file stems."""
    files = _city_files(directory, "adjacency")
    stems = [f.stem for f in files]
    if city_names is not None and list(stems) != list(city_names):
        raise InputError(f"adjacency files {stems} do not match cities {list(city_names)}", path=str(directory))
    if len(files) != len(sizes):
        raise InputError(f"{len(files)} adjacency files for {len(sizes)} cities", path=str(directory))
    return [parse_adjacency(read_table(f, header=False)[0], n, f) for f, n in zip(files, sizes)]


def load_centroids(path):
    """``(ids, xy)`` from a file of ``id x y`` rows; ids are kept as strings."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise InputError(f"cannot read {path}: {err.strerror}", path=str(path)) from None
    comma = "," in text
    ids, xy = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        toks = _split(line, comma)
        if len(toks) != 3:
            raise ParseError(f"expected 3 fields (id, x, y), found {len(toks)}", path, lineno)
        if not ids and not _is_number(toks[1]) and not _is_number(toks[2]):
            continue  # header
        for col in (1, 2):
            if not _is_number(toks[col]) or not math.isfinite(float(toks[col])):
                raise ParseError(f"bad coordinate {toks[col]!r}", path, lineno, col + 1)
        if toks[0] in ids:
            raise ParseError(f"duplicate id {toks[0]!r}", path, lineno, 1)
        ids.append(toks[0])
        xy.append([float(toks[1]), float(toks[2])])
    return ids, np.array(xy, dtype=float).reshape(-1, 2)


def load_geometry(panel, adjacency_dir=None, city_centroids=None, tract_centroid_dir=None):
    """Assemble a Geometry aligned with ``panel``'s city order.

    Missing pieces default to empty: no adjacency means no CAR edges and no
    tract centroids means tract coordinates at the city centroid (enough
    for variants that never use them).
    """
    names = list(panel.city_names)
    sizes = panel.sizes
    if city_centroids is None:
        raise InputError("a city centroid file is required")
    ids, xy = load_centroids(city_centroids)
    missing = [c for c in names if c not in ids]
    if missing:
        raise InputError(f"no centroid for cities {missing}", path=str(city_centroids))
    cities = np.array([xy[ids.index(c)] for c in names])
    if adjacency_dir is not None:
        adjacency = load_adjacency(adjacency_dir, sizes, names)
    else:
        adjacency = [np.zeros((0, 2), dtype=np.int64) for _ in names]
    if tract_centroid_dir is not None:
        files = _city_files(tract_centroid_dir, "tract centroid")
        if [f.stem for f in files] != names:
            raise InputError("tract centroid files do not match the panel cities", path=str(tract_centroid_dir))
        tracts = []
        for f, n in zip(files, sizes):
            _, pts = load_centroids(f)
            if pts.shape[0] != n:
                raise InputError(f"{f} has {pts.shape[0]} tracts, panel has {n}", path=str(f))
            tracts.append(pts)
    else:
        tracts = [np.repeat(c[None, :], n, axis=0) for c, n in zip(cities, sizes)]
    return Geometry(cities, tracts, adjacency, city_names=names)


def write_geometry(geometry, directory):
    """Write city centroids, tract centroids and edge lists in the loader formats."""
    d = Path(directory)
    (d / "adjacency").mkdir(parents=True, exist_ok=True)
    (d / "tracts").mkdir(parents=True, exist_ok=True)
    names = geometry.city_names or [f"city{i + 1:02d}" for i in range(geometry.n_cities)]
    lines = ["name,x,y"] + [f"{n},{_fmt(x)},{_fmt(y)}" for n, (x, y) in zip(names, geometry.city_centroids)]
    (d / "cities.csv").write_text("\n".join(lines) + "\n")
    for n, pts, edges in zip(names, geometry.tract_centroids, geometry.adjacency):
        rows = [f"{j},{_fmt(x)},{_fmt(y)}" for j, (x, y) in enumerate(pts)]
        (d / "tracts" / f"{n}.csv").write_text("\n".join(["id,x,y"] + rows) + "\n")
        (d / "adjacency" / f"{n}.txt").write_text("".join(f"{a} {b}\n" for a, b in edges))
    return {"cities": d / "cities.csv", "tracts": d / "tracts", "adjacency": d / "adjacency"}


# -- provenance ---------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_hash(config):
    """Short SHA-256 of the canonical JSON form of a config mapping."""
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_json(path, payload, provenance):
    out = dict(_jsonable(payload))
    out.update(_jsonable(provenance))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, rows, provenance):
    """Rows of dicts to CSV; every row also carries the provenance columns."""
    rows = [dict(_jsonable(r)) for r in rows]
    prov = _jsonable(provenance)
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    cols += [k for k in prov if k not in cols]

    def cell(v):
        if v is None:
            return "nan"
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, list):
            return ";".join(cell(x) for x in v)
        s = str(v)
        return f'"{s}"' if ("," in s or '"' in s) else s

    lines = [",".join(cols)]
    for r in rows:
        merged = {**prov, **r}
        lines.append(",".join(cell(merged.get(c)) for c in cols))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    return path


# -- draw store -----------------------------------------------------------------


def save_chains(directory, chains, provenance, extra=None):
    """Write draws as little-endian float64 ``(chains, draws, width)`` plus a JSON schema.

    Log-posterior traces go to a second file of shape ``(chains, n_iter)``
    when they were recorded.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    draws = np.stack([c.draws for c in chains]).astype("<f8")
    (d / DRAWS_FILE).write_bytes(draws.tobytes(order="C"))
    traces = [c.logpost_trace for c in chains]
    has_trace = all(t.size for t in traces) and len({t.size for t in traces}) == 1
    if has_trace:
        (d / TRACE_FILE).write_bytes(np.stack(traces).astype("<f8").tobytes(order="C"))
    lay = chains[0].layout
    schema = {
        "format": "little-endian float64, C order",
        "dtype": "<f8",
        "shape": list(draws.shape),
        "axes": ["chain", "draw", "parameter"],
        "layout": lay.to_dict(),
        "trace_file": TRACE_FILE if has_trace else None,
        "trace_shape": [len(traces), traces[0].size] if has_trace else None,
        "chains": [
            {
                "chain_id": c.chain_id,
                "acceptance_rate_lambda1": c.acceptance_rate_lambda1,
                "mh_step_scale": c.mh_step_scale,
                "n_singular": c.n_singular,
            }
            for c in chains
        ],
        "anchor": chains[0].anchor,
    }
    schema.update(extra or {})
    write_json(d / SCHEMA_FILE, schema, provenance)
    return d


def load_chains(directory):
    """Inverse of :func:`save_chains`; returns ``(chains, schema)``."""
    from .sampler import ChainOutput

    d = Path(directory)
    try:
        schema = json.loads((d / SCHEMA_FILE).read_text())
    except FileNotFoundError:
        raise InputError(f"no draw store in {d} (missing {SCHEMA_FILE})", path=str(d)) from None
    shape = tuple(schema["shape"])
    raw = np.frombuffer((d / DRAWS_FILE).read_bytes(), dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise InputError(f"{DRAWS_FILE} holds {raw.size} values, schema says {shape}", path=str(d))
    draws = raw.reshape(shape).astype(float)
    traces = None
    if schema.get("trace_file"):
        traces = np.frombuffer((d / TRACE_FILE).read_bytes(), dtype="<f8").reshape(schema["trace_shape"])
    lay = ParamLayout(schema["layout"]["p"], tuple(schema["layout"]["sizes"]))
    chains = []
    for c, meta in enumerate(schema["chains"]):
        rate = meta["acceptance_rate_lambda1"]
        chains.append(
            ChainOutput(
                draws=draws[c],
                layout=lay,
                logpost_trace=traces[c].astype(float) if traces is not None else np.empty(0),
                acceptance_rate_lambda1=float("nan") if rate is None else rate,
                chain_id=meta["chain_id"],
                anchor=schema.get("anchor", 0),
                mh_step_scale=meta["mh_step_scale"],
                n_singular=meta["n_singular"],
            )
        )
    return chains, schema
