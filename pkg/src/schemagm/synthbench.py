"""Synthetic data from the generative model, the join-table baseline, and
desk-scale experiment harnesses (missing values, scaling, head-to-head)."""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .compiler import compile
from .data import ColumnData, Dataset, KeyIndex, TableData, mask_cells, standardize
from .engine import FitConfig, VMP
from .query import predict_missing_cells
from .schema import (
    ATTR,
    BOOLEAN,
    CATEGORICAL,
    FK,
    PK,
    REAL,
    AttributeType,
    Column,
    ModelConfig,
    Schema,
    Table,
    parse_ddl,
    topo_order,
)

log = logging.getLogger(__name__)

UMR_DDL = """
CREATE TABLE users (
  id INTEGER PRIMARY KEY,
  gender BOOLEAN,
  age REAL
);
CREATE TABLE movies (
  id INTEGER PRIMARY KEY,
  category TEXT,
  year REAL
);
CREATE TABLE ratings (
  id INTEGER PRIMARY KEY,
  user_id INTEGER REFERENCES users(id),
  movie_id INTEGER REFERENCES movies(id),
  score REAL
);
"""

H2H_DDL = """
CREATE TABLE players (
  id INTEGER PRIMARY KEY
);
CREATE TABLE matches (
  id INTEGER PRIMARY KEY,
  player1 INTEGER REFERENCES players(id),
  player2 INTEGER REFERENCES players(id),
  result BOOLEAN
);
"""

UMR_K = {"users": 4, "movies": 3, "ratings": 5}
UMR_SIZES = {"users": 943, "movies": 1682, "ratings": 100_000}
CHILD_CPT_ALPHA = 0.3
ROOT_WEIGHT_ALPHA = 10.0
CATEGORY_LEVELS = 4
# bad, excellent, good: P(player1 beats player2) by tier pair
TIER_WIN_PROBS = ((0.5, 0.1, 0.25), (0.9, 0.5, 0.75), (0.75, 0.25, 0.5))


class GenerationError(ValueError):
    """Generator parameters inconsistent with the schema."""


@dataclass(frozen=True, eq=False)
class GenParams:
    """Ground-truth parameters for ancestral sampling.

    ``attrs[table][column]`` holds ``{"mean", "sd"}`` arrays of length K for
    real columns, ``{"probs"}`` (K x L) for categorical ones and ``{"p"}``
    (length K) for Boolean ones.
    """

    schema: Schema
    k: dict
    cpts: dict
    attrs: dict
    rows: dict
    seed: int = 0

    def __post_init__(self):
        for t in self.schema.tables:
            k = self.k.get(t.name)
            if k is None or k < 1:
                raise GenerationError(f"{t.name}: missing or invalid K")
            configs = int(np.prod([self.k[c.ref_table] for c in t.foreign_keys], dtype=np.int64))
            cpt = np.asarray(self.cpts.get(t.name))
            if cpt.shape != (configs, k):
                raise GenerationError(f"{t.name}: CPT shape {cpt.shape}, expected {(configs, k)}")
            if not np.allclose(cpt.sum(axis=1), 1.0) or (cpt < 0).any():
                raise GenerationError(f"{t.name}: CPT rows must be probability vectors")
            if self.rows.get(t.name, 0) < 1:
                raise GenerationError(f"{t.name}: row count must be >= 1")
            for c in t.attributes:
                p = self.attrs.get(t.name, {}).get(c.name)
                if p is None:
                    raise GenerationError(f"{t.name}.{c.name}: missing attribute parameters")
                if c.type.kind == REAL:
                    ok = np.shape(p["mean"]) == (k,) and np.shape(p["sd"]) == (k,)
                elif c.type.kind == CATEGORICAL:
                    ok = np.ndim(p["probs"]) == 2 and np.shape(p["probs"])[0] == k
                else:
                    ok = np.shape(p["p"]) == (k,)
                if not ok:
                    raise GenerationError(f"{t.name}.{c.name}: parameter shape does not match K={k}")


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    params: GenParams
    z: dict


@dataclass
class ExperimentResult:
    label: str
    header: tuple
    rows: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self.rows)


# -- generation ---------------------------------------------------------------


def generate(params):
    """Ancestral sampling: FKs uniform over parent rows, z from the gate CPT row
    of the sampled parent components, then attributes from z's parameters."""
    rng = np.random.default_rng(params.seed)
    schema = _resolve_levels(params)
    tables, z = {}, {}
    for name in topo_order(schema):
        t = schema.table(name)
        n = params.rows[name]
        k = params.k[name]
        fks = _sample_fks(rng, t, n, params.rows)
        config = np.zeros(n, dtype=np.int64)
        for c in t.foreign_keys:
            config = config * params.k[c.ref_table] + z[c.ref_table][fks[c.name]]
        cdf = np.cumsum(np.asarray(params.cpts[name], dtype=float), axis=1)
        u = rng.random(n)
        zt = np.minimum((u[:, None] > cdf[config]).sum(axis=1), k - 1)
        z[name] = zt
        attrs, levels = {}, {}
        for c in t.attributes:
            p = params.attrs[name][c.name]
            if c.type.kind == REAL:
                values = np.asarray(p["mean"], float)[zt] + np.asarray(p["sd"], float)[zt] * rng.standard_normal(n)
            elif c.type.kind == CATEGORICAL:
                probs = np.asarray(p["probs"], float)
                cdf_c = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
                values = np.minimum((rng.random(n)[:, None] > cdf_c[zt]).sum(axis=1), probs.shape[1] - 1)
                levels[c.name] = tuple(f"c{i}" for i in range(probs.shape[1]))
            else:
                values = rng.random(n) < np.asarray(p["p"], float)[zt]
            attrs[c.name] = ColumnData(values, np.zeros(n, dtype=bool))
        keys = KeyIndex(tuple(str(i + 1) for i in range(n)))
        fk_cols = {c: ColumnData(v, np.zeros(n, dtype=bool)) for c, v in fks.items()}
        tables[name] = TableData(name, n, keys, attrs, fk_cols, levels)
    return Dataset(schema, tables), GroundTruthModel(params, z)


def _sample_fks(rng, table, n, rows):
    out = {}
    by_parent = {}
    for c in table.foreign_keys:
        n_parent = rows[c.ref_table]
        taken = by_parent.setdefault(c.ref_table, [])
        if len(taken) >= n_parent:
            raise GenerationError(f"{table.name}: more FKs into {c.ref_table} than it has rows")
        v = rng.integers(0, n_parent, size=n)
        # FKs into one parent must name distinct rows: redraw collisions
        clash = np.zeros(n, dtype=bool)
        for prev in taken:
            clash |= v == prev
        while clash.any():
            v[clash] = rng.integers(0, n_parent, size=int(clash.sum()))
            clash[:] = False
            for prev in taken:
                clash |= v == prev
        taken.append(v)
        out[c.name] = v.astype(np.int64)
    return out


def _resolve_levels(params):
    tables = []
    for t in params.schema.tables:
        cols = []
        for c in t.columns:
            if c.role == ATTR and c.type.kind == CATEGORICAL:
                n_levels = np.shape(params.attrs[t.name][c.name]["probs"])[1]
                c = replace(c, type=AttributeType(CATEGORICAL, max(n_levels, 2)))
            cols.append(c)
        tables.append(Table(t.name, tuple(cols)))
    return Schema(tuple(tables))


def _cpt(rng, schema, k, name):
    t = schema.table(name)
    configs = int(np.prod([k[c.ref_table] for c in t.foreign_keys], dtype=np.int64))
    alpha = CHILD_CPT_ALPHA if t.foreign_keys else ROOT_WEIGHT_ALPHA
    return rng.dirichlet(np.full(k[name], alpha), size=configs)


def umr_params(seed=0, sizes=None, k=None):
    """Default synthetic users/movies/ratings generator.

    Real attributes have component means spaced 4 true sds apart.
    """
    rng = np.random.default_rng([seed, 7919])
    schema = parse_ddl(UMR_DDL)
    k = dict(UMR_K if k is None else k)
    rows = dict(UMR_SIZES if sizes is None else sizes)
    cpts = {t.name: _cpt(rng, schema, k, t.name) for t in schema.tables}

    def spaced(base, step, sd, kk):
        return {"mean": base + step * rng.permutation(kk).astype(float), "sd": np.full(kk, sd)}

    attrs = {
        "users": {"gender": {"p": rng.uniform(0.1, 0.9, size=k["users"])},
                  "age": spaced(20.0, 12.0, 3.0, k["users"])},
        "movies": {"category": {"probs": rng.dirichlet(np.full(CATEGORY_LEVELS, 0.5), size=k["movies"])},
                   "year": spaced(1950.0, 16.0, 4.0, k["movies"])},
        "ratings": {"score": spaced(1.0, 1.0, 0.25, k["ratings"])},
    }
    return GenParams(schema, k, cpts, attrs, rows, seed)


def h2h_params(seed=0, players=90, matches=3000, win_probs=TIER_WIN_PROBS):
    """Players in len(win_probs) tiers; a match's component is its outcome."""
    schema = parse_ddl(H2H_DDL)
    win = np.asarray(win_probs, dtype=float)
    tiers = win.shape[0]
    if win.shape != (tiers, tiers) or ((win < 0) | (win > 1)).any():
        raise GenerationError("win_probs must be a square matrix of probabilities")
    cpt = np.stack([win.reshape(-1), 1.0 - win.reshape(-1)], axis=1)
    return GenParams(
        schema, {"players": tiers, "matches": 2},
        {"players": np.full((1, tiers), 1.0 / tiers), "matches": cpt},
        {"players": {}, "matches": {"result": {"p": np.array([1.0, 0.0])}}},
        {"players": players, "matches": matches}, seed)


def random_params(seed, max_tables=3, max_rows=5000):
    """A random schema (chain, star, or two FKs into one parent) with random parameters."""
    rng = np.random.default_rng([seed, 104729])
    n_tables = int(rng.integers(1, max_tables + 1))
    kinds = [REAL, CATEGORICAL, BOOLEAN]
    cols_by_table = []
    for i in range(n_tables):
        name = f"t{i}"
        cols = [Column("id", PK, "INTEGER")]
        if i > 0:
            shape = rng.integers(0, 3)
            parents = {0: [i - 1], 1: sorted(set(rng.choice(i, size=min(i, 2), replace=False).tolist())),
                       2: [int(rng.integers(0, i))] * 2}[int(shape)]
            for j, p in enumerate(parents):
                cols.append(Column(f"fk{j}", FK, "INTEGER", None, f"t{p}", "id"))
        for j in range(int(rng.integers(0 if i else 1, 3))):
            kind = kinds[int(rng.integers(0, 3))]
            cols.append(Column(f"a{j}", ATTR, kind.upper(), AttributeType(kind)))
        cols_by_table.append(Table(name, tuple(cols)))
    schema = Schema(tuple(cols_by_table))
    k = {t.name: int(rng.integers(1, 4)) for t in schema.tables}
    rows = {}
    total = 0
    for t in schema.tables:
        low = 4 if not t.foreign_keys else 20
        rows[t.name] = int(rng.integers(low, max(low + 1, max_rows // max(n_tables, 1))))
        total += rows[t.name]
    cpts = {t.name: rng.dirichlet(np.full(k[t.name], 0.5),
                                  size=int(np.prod([k[c.ref_table] for c in t.foreign_keys], dtype=np.int64)))
            for t in schema.tables}
    attrs = {}
    for t in schema.tables:
        kk = k[t.name]
        attrs[t.name] = {}
        for c in t.attributes:
            if c.type.kind == REAL:
                attrs[t.name][c.name] = {"mean": rng.normal(0, 3, size=kk), "sd": rng.uniform(0.3, 1.5, size=kk)}
            elif c.type.kind == CATEGORICAL:
                attrs[t.name][c.name] = {"probs": rng.dirichlet(np.ones(int(rng.integers(2, 5))), size=kk)}
            else:
                attrs[t.name][c.name] = {"p": rng.uniform(0.05, 0.95, size=kk)}
    return GenParams(schema, k, cpts, attrs, rows, seed)


# -- join baseline ------------------------------------------------------------


@dataclass(frozen=True)
class JoinedColumn:
    name: str
    table: str
    column: str
    rows: np.ndarray  # source row for each joined row


def leaf_tables(schema):
    referenced = {c.ref_table for t in schema.tables for c in t.foreign_keys}
    return [t.name for t in schema.tables if t.name not in referenced]


def join_columns(dataset, leaf=None):
    """Attribute columns reachable from the leaf table along FK paths."""
    schema = dataset.schema
    if leaf is None:
        leaves = leaf_tables(schema)
        if len(leaves) != 1:
            raise ValueError(f"expected a single leaf table, found {leaves}; pass leaf=")
        leaf = leaves[0]
    n = dataset.table(leaf).n_rows
    out = []

    def walk(table, prefix, rows):
        t = schema.table(table)
        tdata = dataset.table(table)
        for c in t.attributes:
            if c.name in tdata.attrs:
                out.append(JoinedColumn(prefix + c.name, table, c.name, rows))
        for c in t.foreign_keys:
            fk = tdata.fks[c.name]
            if fk.missing[rows].any():
                raise ValueError(f"join baseline needs observed foreign keys; {table}.{c.name} has latent cells")
            walk(c.ref_table, f"{prefix}{c.name}.", fk.values[rows])

    walk(leaf, "", np.arange(n))
    return leaf, out


def join_baseline(dataset, leaf=None):
    """Flatten the dataset into one row per leaf row by following every FK."""
    leaf, cols = join_columns(dataset, leaf)
    src_schema = dataset.schema
    ltable = src_schema.table(leaf)
    pk = [c for c in ltable.columns if c.role == PK]
    schema_cols, attrs, levels, transforms = list(pk), {}, {}, {}
    for jc in cols:
        src_col = src_schema.table(jc.table).column(jc.column)
        schema_cols.append(replace(src_col, name=jc.name))
        data = dataset.table(jc.table).attrs[jc.column]
        attrs[jc.name] = ColumnData(data.values[jc.rows], data.missing[jc.rows])
        if jc.column in dataset.table(jc.table).levels:
            levels[jc.name] = dataset.table(jc.table).levels[jc.column]
        if (jc.table, jc.column) in dataset.transforms:
            transforms[(leaf, jc.name)] = dataset.transforms[(jc.table, jc.column)]
    schema = Schema((Table(leaf, tuple(schema_cols)),))
    src = dataset.table(leaf)
    tdata = TableData(leaf, src.n_rows, src.keys, attrs, {}, levels)
    return Dataset(schema, {leaf: tdata}, transforms)


# -- metrics --------------------------------------------------------------------


def rmse(predictions, truths):
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    if p.size == 0:
        raise ValueError("rmse of an empty set of pairs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def adjusted_rand_index(a, b):
    """Adjusted Rand index between two labelings of the same items."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("labelings differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return float(np.sum(x * (x - 1) / 2))

    n = len(a)
    total = n * (n - 1) / 2
    index = pairs(table)
    ra, rb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = ra * rb / total if total else 0.0
    top = 0.5 * (ra + rb)
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


# -- experiments --------------------------------------------------------------


def _fit(dataset, k, config):
    spec = compile(dataset.schema, ModelConfig(components=k))
    vmp = VMP(spec, dataset, config)
    try:
        state, report = vmp.fit()
    finally:
        vmp.close()
    return spec, state, report


def missing_value_experiment(seeds=(0, 1, 2), fractions=(0.1, 0.2, 0.3, 0.4, 0.5),
                             config=None, sizes=None, k=None):
    """Relational model vs join baseline on masked synthetic UMR data.

    Rows: (fraction, seed, model, attribute, rmse), RMSE in original units.
    """
    config = config or FitConfig()
    k = dict(UMR_K if k is None else k)
    result = ExperimentResult("missing_rmse", ("fraction", "seed", "model", "attribute", "rmse"))
    real_attrs = [("ratings", "score"), ("users", "age"), ("movies", "year")]
    for seed in seeds:
        full, _ = generate(umr_params(seed, sizes))
        for fraction in fractions:
            masked, truths = mask_cells(full, fraction, seed=[seed, int(round(fraction * 1000))])
            data = standardize(masked)
            run = replace(config, seed=seed)
            by_cell = {(g.table, g.column, g.row): g.value for g in truths}
            _, state, _ = _fit(data, k, run)
            rel = {}
            spec = compile(data.schema, ModelConfig(components=k))
            for p in predict_missing_cells(state, spec, data):
                rel[(p.table, p.column, p.row)] = p.payload.get("mean")
            base = _baseline_predictions(data, k, run)
            for table, column in real_attrs:
                cells = [(key, v) for key, v in by_cell.items() if key[:2] == (table, column)]
                truth = [v for _, v in cells]
                result.rows.append((fraction, seed, "relational", column,
                                    rmse([rel[key] for key, _ in cells], truth)))
                result.rows.append((fraction, seed, "join", column,
                                    rmse([base[key] for key, _ in cells], truth)))
            log.info("missing-value experiment: seed %d fraction %.2f done", seed, fraction)
    return result


def _baseline_predictions(data, k, config):
    leaf, cols = join_columns(data)
    joined = join_baseline(data, leaf)
    spec, state, _ = _fit(joined, {leaf: k[leaf]}, config)
    per_joined = {}
    for p in predict_missing_cells(state, spec, joined):
        if p.kind == "real":
            per_joined[(p.column, p.row)] = p.payload["mean"]
    out = {}
    for jc in cols:
        if data.schema.table(jc.table).column(jc.column).type.kind != REAL:
            continue
        col = data.table(jc.table).attrs[jc.column]
        sums = np.zeros(data.table(jc.table).n_rows)
        counts = np.zeros_like(sums)
        for r_joined, src in enumerate(jc.rows):
            v = per_joined.get((jc.name, r_joined))
            if v is not None:
                sums[src] += v
                counts[src] += 1
        fallback = data.transform(jc.table, jc.column).inverse(0.0)
        for r in np.flatnonzero(col.missing):
            out[(jc.table, jc.column, int(r))] = sums[r] / counts[r] if counts[r] else float(fallback)
    return out


def scaling_experiment(row_counts=(10_000, 20_000, 40_000, 80_000), sweeps=10, config=None,
                       k=None, seed=0):
    """Seconds per sweep against leaf-table size, at K and at doubled K."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    k = dict(UMR_K if k is None else k)
    config = replace(config or FitConfig(), max_sweeps=sweeps, tol=1e-300, seed=seed)
    result = ExperimentResult("scaling", ("rows", "K", "seconds_per_sweep"))
    series = {}
    for label, kk in (("base", k), ("doubled", {t: 2 * v for t, v in k.items()})):
        times = []
        for n in row_counts:
            sizes = {**UMR_SIZES, "ratings": int(n)}
            data = standardize(generate(umr_params(seed, sizes))[0])
            _, _, report = _fit(data, kk, config)
            sec = float(np.mean(report.sweep_seconds))
            times.append(sec)
            result.rows.append((int(n), kk["ratings"], sec))
            log.info("scaling: %s K, %d rows, %.4f s/sweep", label, n, sec)
        series[label] = times
        if len(row_counts) >= 3:
            result.extras[f"r2_{label}"] = linear_r2(row_counts, times)
    result.extras["series"] = series
    return result


def linear_r2(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0


def head_to_head_experiment(players=90, matches=3000, win_probs=TIER_WIN_PROBS, k=3, seeds=(0,),
                            config=None):
    """Cluster players from match outcomes alone.

    Rows: (seed, cluster_i, cluster_j, mean_result) with clusters ordered by
    ascending mean win rate; ``extras`` holds the agreement per seed.
    """
    config = config or FitConfig(max_sweeps=300)
    result = ExperimentResult("h2h", ("seed", "cluster_i", "cluster_j", "mean_result"))
    result.extras["ari"] = {}
    result.extras["matrix"] = {}
    for seed in seeds:
        data, truth = generate(h2h_params(seed, players, matches, win_probs))
        _, state, _ = _fit(data, {"players": k, "matches": 2}, replace(config, seed=seed))
        labels = np.argmax(state.resp["players"], axis=1)
        m = data.table("matches")
        p1, p2 = m.fks["player1"].values, m.fks["player2"].values
        res = m.attrs["result"].values.astype(float)
        wins = np.zeros(players)
        games = np.zeros(players)
        np.add.at(wins, p1, res)
        np.add.at(wins, p2, 1.0 - res)
        np.add.at(games, p1, 1.0)
        np.add.at(games, p2, 1.0)
        rate = np.divide(wins, games, out=np.full(players, 0.5), where=games > 0)
        used = [c for c in range(k) if (labels == c).any()]
        order = sorted(used, key=lambda c: (rate[labels == c].mean(), c))
        rank = {c: i for i, c in enumerate(order)}
        matrix = np.full((len(order), len(order)), np.nan)
        for i, ci in enumerate(order):
            for j, cj in enumerate(order):
                sel = (labels[p1] == ci) & (labels[p2] == cj)
                if sel.any():
                    matrix[i, j] = res[sel].mean()
                    result.rows.append((seed, i, j, float(matrix[i, j])))
        result.extras["matrix"][seed] = matrix
        result.extras["ari"][seed] = adjusted_rand_index(truth.z["players"], [rank[c] for c in labels])
    return result


def matrix_is_monotone(matrix):
    """Rows rise down each column and fall along each row (NaN cells skipped)."""
    m = np.asarray(matrix, dtype=float)
    for axis, sign in ((0, 1.0), (1, -1.0)):
        lines = m.T if axis == 0 else m
        for line in lines:
            v = line[~np.isnan(line)]
            if np.any(sign * np.diff(v) < 0):
                return False
    return True

