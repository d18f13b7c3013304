"""Posterior predictions, probabilistic queries, and cluster assignments."""
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .compiler import BERNOULLI, DISCRETE, GAUSSIAN
from .data import DataError, Transform, _parse_bool, _parse_real
from .engine import LoadedPosterior
from .expfam import beta_elog_array, dirichlet_elog_array, gamma_moments_array

REAL_KIND, CATEGORICAL_KIND, BOOLEAN_KIND, FK_KIND = "real", "categorical", "boolean", "fk"


class QueryError(ValueError):
    """Malformed or unresolvable query records."""


@dataclass(frozen=True)
class Prediction:
    table: str
    key: str
    column: str
    kind: str
    payload: dict
    row: int | None = None

    @property
    def mean(self):
        if self.kind == REAL_KIND:
            return self.payload["mean"]
        if self.kind == BOOLEAN_KIND:
            return self.payload["p_true"]
        raise TypeError(f"{self.kind} prediction has no scalar mean")


def trained_model(state, spec, dataset):
    """Bundle a fitted state with the dataset metadata queries need."""
    return LoadedPosterior(
        spec, state, dict(dataset.transforms),
        {(n, c): lv for n in spec.order for c, lv in dataset.table(n).levels.items()},
        {n: dataset.table(n).keys for n in spec.order}, True)


# -- predictive distributions -------------------------------------------------


def real_predictive(weights, post, transform):
    """Mixture predictive (mean, variance, weights) in original units."""
    shape, rate = post.shape, post.rate
    # Student-t variance of each component; falls back to 1/E[tau] when infinite
    noise = np.where(shape > 1.0, rate / np.maximum(shape - 1.0, 1e-300), rate / shape)
    mean = float(weights @ post.mean)
    second = float(weights @ (post.var + noise + post.mean ** 2))
    var = max(second - mean * mean, 0.0)
    return {"mean": float(transform.inverse(mean)), "variance": var * transform.scale ** 2,
            "weights": [float(w) for w in weights]}


def categorical_predictive(weights, post, levels):
    alpha = post.alpha
    probs = weights @ (alpha / alpha.sum(axis=1, keepdims=True))
    probs = probs / probs.sum()
    names = list(levels) + [f"<level {i}>" for i in range(len(levels), alpha.shape[1])]
    return {"levels": names, "probs": [float(p) for p in probs]}


def boolean_predictive(weights, post):
    return {"p_true": float(weights @ (post.a / (post.a + post.b)))}


def _attribute_prediction(model, table, column, family, weights, key, row=None):
    post = model.state.params[table][column]
    if family == GAUSSIAN:
        transform = model.transforms.get((table, column), Transform(0.0, 1.0))
        return Prediction(table, key, column, REAL_KIND, real_predictive(weights, post, transform), row)
    if family == DISCRETE:
        levels = model.levels.get((table, column), ())
        return Prediction(table, key, column, CATEGORICAL_KIND,
                          categorical_predictive(weights, post, levels), row)
    return Prediction(table, key, column, BOOLEAN_KIND, boolean_predictive(weights, post), row)


def _fk_prediction(table, key, column, probs, parent_keys, row=None):
    return Prediction(table, key, column, FK_KIND,
                      {"keys": list(parent_keys.keys), "probs": [float(p) for p in probs]}, row)


def predict_missing_cells(state, spec, dataset):
    """One Prediction per missing attribute cell and per latent foreign key."""
    model = trained_model(state, spec, dataset)
    out = []
    for tm in spec.tables:
        tdata = dataset.table(tm.table)
        R = state.resp[tm.table]
        for a in tm.attributes:
            col = tdata.attrs[a.column]
            for r in np.flatnonzero(col.missing):
                out.append(_attribute_prediction(model, tm.table, a.column, a.family, R[r],
                                                 tdata.keys.keys[r], int(r)))
        for e in tm.gate.parent_edges:
            fk = tdata.fks[e.column]
            lat = np.flatnonzero(fk.missing)
            if len(lat):
                q = state.fk[tm.table][e.column]
                parent_keys = dataset.table(e.parent).keys
                for i, r in enumerate(lat):
                    out.append(_fk_prediction(tm.table, tdata.keys.keys[r], e.column, q[i],
                                              parent_keys, int(r)))
    return out


def cluster_assignments(state, table):
    """(component, probability) per row; ties go to the lowest component."""
    if table not in state.resp:
        raise KeyError(f"unknown table {table!r}")
    R = state.resp[table]
    comp = np.argmax(R, axis=1)
    return [(int(c), float(R[i, c])) for i, c in enumerate(comp)]


# -- probabilistic queries ----------------------------------------------------


@dataclass
class _Record:
    index: int
    table: str
    local_id: str
    known: dict = field(default_factory=dict)  # column -> encoded value
    unknown: list = field(default_factory=list)  # attribute columns to predict
    links: dict = field(default_factory=dict)  # fk column -> ("row", j) | ("local", idx) | ("latent", None)


def parse_records(model, records):
    """Validate query records against the model and encode their bindings."""
    spec = model.spec
    parsed = []
    local = {}
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "table" not in rec:
            raise QueryError(f"record {i}: expected an object with a 'table' key")
        table = rec["table"]
        if table not in spec.order:
            raise QueryError(f"record {i}: unknown table {table!r}")
        lid = str(rec.get("id", i))
        if (table, lid) in local:
            raise QueryError(f"record {i}: duplicate local id {lid!r} in table {table!r}")
        local[(table, lid)] = i
        parsed.append(_Record(i, table, lid))
    for rec, raw in zip(parsed, records):
        tm = spec.table(rec.table)
        schema_table = spec.schema.table(rec.table)
        bindings = raw.get("bindings", {})
        known_cols = {c.name for c in schema_table.columns}
        for col in bindings:
            if col not in known_cols:
                raise QueryError(f"record {rec.local_id!r}: table {rec.table!r} has no column {col!r}")
        for a in tm.attributes:
            value = bindings.get(a.column)
            if value is None:
                rec.unknown.append(a.column)
            else:
                rec.known[a.column] = _encode(model, rec, a, value)
        for e in tm.gate.parent_edges:
            value = bindings.get(e.column)
            if value is None:
                rec.links[e.column] = ("latent", None)
                continue
            ref = value["ref"] if isinstance(value, dict) else value
            if isinstance(value, dict) and "ref" not in value:
                raise QueryError(f"record {rec.local_id!r}: binding for {e.column} needs a 'ref'")
            ref = str(ref)
            if (e.parent, ref) in local:
                rec.links[e.column] = ("local", local[(e.parent, ref)])
            else:
                try:
                    rec.links[e.column] = ("row", model.keys[e.parent].lookup(ref))
                except KeyError:
                    raise QueryError(f"record {rec.local_id!r}: {e.column}={ref!r} matches neither a "
                                     f"{e.parent} row nor a query record") from None
        if not rec.unknown and all(kind != "latent" for kind, _ in rec.links.values()):
            raise QueryError(f"record {rec.local_id!r} has no unknown entries")
    _check_acyclic(parsed)
    _check_links(spec, parsed)
    return parsed


def _encode(model, rec, attr, value):
    where = f"record {rec.local_id!r}, column {attr.column}"
    try:
        if attr.family == GAUSSIAN:
            raw = value if isinstance(value, (int, float)) and not isinstance(value, bool) \
                else _parse_real(str(value), where)
            tr = model.transforms.get((rec.table, attr.column), Transform(0.0, 1.0))
            return float(tr.forward(raw))
        if attr.family == BERNOULLI:
            return value if isinstance(value, bool) else _parse_bool(str(value), where)
    except DataError as exc:
        raise QueryError(str(exc)) from None
    levels = model.levels.get((rec.table, attr.column), ())
    try:
        return list(levels).index(str(value))
    except ValueError:
        raise QueryError(f"{where}: unknown level {value!r}") from None


def _check_acyclic(records):
    state = {}

    def visit(i):
        if state.get(i) == 1:
            raise QueryError(f"cyclic local references through record {records[i].local_id!r}")
        if state.get(i) == 2:
            return
        state[i] = 1
        for kind, target in records[i].links.values():
            if kind == "local":
                visit(target)
        state[i] = 2

    for i in range(len(records)):
        visit(i)


def _check_links(spec, records):
    for rec in records:
        tm = spec.table(rec.table)
        seen = {}
        for e in tm.gate.parent_edges:
            kind, target = rec.links[e.column]
            if kind == "latent":
                continue
            if (e.parent, kind, target) in seen:
                raise QueryError(f"record {rec.local_id!r}: {seen[(e.parent, kind, target)]} and "
                                 f"{e.column} reference the same {e.parent} row")
            seen[(e.parent, kind, target)] = e.column


class _QueryEngine:
    """Restricted message passing over query-local latent variables."""

    def __init__(self, model, records):
        self.model = model
        self.spec = model.spec
        self.records = records
        state = model.state
        self.elog = {}
        self.scores = {}
        for tm in self.spec.tables:
            shape = tuple(e.parent_k for e in tm.gate.parent_edges) + (tm.k,)
            self.elog[tm.table] = dirichlet_elog_array(state.cpt[tm.table]).reshape(shape)
        order = {name: i for i, name in enumerate(self.spec.order)}
        self.visit = sorted(range(len(records)), key=lambda i: (order[records[i].table], i))
        self.R = [np.full(self.spec.table(r.table).k, 1.0 / self.spec.table(r.table).k) for r in records]
        self.qf = {}
        self.log_prior = {}
        self.children = {i: [] for i in range(len(records))}
        cap = self.spec.config.limits.fk_candidate_cap
        for rec in records:
            tm = self.spec.table(rec.table)
            for pos, e in enumerate(tm.gate.parent_edges):
                kind, target = rec.links[e.column]
                if kind == "local":
                    self.children[target].append((rec.index, pos))
                elif kind == "latent":
                    n = len(model.keys[e.parent])
                    if n > cap:
                        raise QueryError(f"record {rec.local_id!r}: latent {e.column} over {n} rows "
                                         f"exceeds fk_candidate_cap={cap}")
                    if not model.has_resp:
                        raise QueryError("posterior file has no responsibilities; latent foreign keys "
                                         "cannot be queried")
                    self.qf[(rec.index, pos)] = np.full(n, 1.0 / n)
                    taken = [t for c, (k, t) in rec.links.items()
                             if k == "row" and c != e.column and self._parent_of(rec, c) == e.parent]
                    self.log_prior[(rec.index, pos)] = np.zeros(n)
                    if taken:
                        self.log_prior[(rec.index, pos)][taken] = -np.inf
        self.attr_scores = [self._known_scores(rec) for rec in records]

    def _parent_of(self, rec, column):
        return self.spec.schema.table(rec.table).column(column).ref_table

    def _known_scores(self, rec):
        tm = self.spec.table(rec.table)
        out = np.zeros(tm.k)
        state = self.model.state
        for a in tm.attributes:
            if a.column not in rec.known:
                continue
            x = rec.known[a.column]
            post = state.params[rec.table][a.column]
            if a.family == GAUSSIAN:
                e_tau, e_log_tau = gamma_moments_array(post.shape, post.rate)
                sq = x * x - 2.0 * x * post.mean + post.mean ** 2 + post.var
                out += 0.5 * (e_log_tau - np.log(2 * np.pi) - e_tau * sq)
            elif a.family == DISCRETE:
                out += dirichlet_elog_array(post.alpha)[:, x]
            else:
                e_log_p, e_log_q = beta_elog_array(post.a, post.b)
                out += e_log_p if x else e_log_q
        return out

    def _trained_resp(self, table, row):
        if not self.model.has_resp:
            raise QueryError("posterior file has no responsibilities; existing rows cannot be referenced")
        return self.model.state.resp[table][row]

    def marginal(self, rec, pos):
        e = self.spec.table(rec.table).gate.parent_edges[pos]
        kind, target = rec.links[e.column]
        if kind == "row":
            return self._trained_resp(e.parent, target)
        if kind == "local":
            return self.R[target]
        return self.qf[(rec.index, pos)] @ self.model.state.resp[e.parent]

    def gate(self, rec):
        tm = self.spec.table(rec.table)
        T = self.elog[rec.table]
        qs = [self.marginal(rec, p) for p in range(len(tm.gate.parent_edges))]
        for q in qs:
            T = np.tensordot(q, T, axes=([0], [0]))
        return T

    def message(self, child_idx, pos):
        """Message from a child record to the parent behind edge ``pos``."""
        rec = self.records[child_idx]
        tm = self.spec.table(rec.table)
        T = self.elog[rec.table] @ self.R[child_idx]  # K1..Km
        m = len(tm.gate.parent_edges)
        for p in range(m - 1, -1, -1):
            if p != pos:
                T = np.tensordot(T, self.marginal(rec, p), axes=([p], [0]))
        return T

    def run(self, iters):
        for _ in range(iters):
            for i in self.visit:
                rec = self.records[i]
                logits = self.gate(rec) + self.attr_scores[i]
                for child, pos in self.children[i]:
                    logits = logits + self.message(child, pos)
                w = np.exp(logits - logits.max())
                self.R[i] = w / w.sum()
            for (i, pos), _ in sorted(self.qf.items()):
                rec = self.records[i]
                e = self.spec.table(rec.table).gate.parent_edges[pos]
                logits = self.model.state.resp[e.parent] @ self.message(i, pos) + self.log_prior[(i, pos)]
                w = np.exp(logits - logits.max())
                self.qf[(i, pos)] = w / w.sum()

    def predictions(self):
        out = []
        for rec in self.records:
            tm = self.spec.table(rec.table)
            for a in tm.attributes:
                if a.column in rec.unknown:
                    out.append(_attribute_prediction(self.model, rec.table, a.column, a.family,
                                                     self.R[rec.index], rec.local_id))
            for pos, e in enumerate(tm.gate.parent_edges):
                if (rec.index, pos) in self.qf:
                    out.append(_fk_prediction(rec.table, rec.local_id, e.column,
                                              self.qf[(rec.index, pos)], self.model.keys[e.parent]))
        return out


def answer_query(model, records, iters=20):
    """Predict the unknown entries of a small set of new records.

    Trained parameters and the responsibilities of referenced existing rows
    stay fixed; only the records' own latent variables are updated.
    """
    if iters < 1:
        raise QueryError("iters must be >= 1")
    parsed = parse_records(model, records)
    engine = _QueryEngine(model, parsed)
    engine.run(iters)
    return engine.predictions()


def load_query_file(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise QueryError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise QueryError(f"{path}: expected a JSON list of records")
    return doc


def write_predictions(predictions, out, id_header="row"):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["table", id_header, "column", "kind", "payload"])
    for p in predictions:
        w.writerow([p.table, p.key, p.column, p.kind, json.dumps(p.payload, separators=(",", ":"))])
