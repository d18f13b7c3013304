"""Variational message passing over a compiled ModelSpec.

Mean-field posterior: per-row component responsibilities q(z), one
Dirichlet per gate-CPT row, q(mu)q(tau) per Gaussian attribute component,
a Dirichlet or Beta per discrete/Boolean attribute component, and a
categorical over parent rows for each missing foreign-key cell.

One sweep updates, in order: responsibilities of every table (parents
first), latent foreign keys, then gate CPTs and attribute parameters.
Each step is an exact coordinate update, so the ELBO never decreases.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from . import kernels
from .compiler import BERNOULLI, DISCRETE, GAUSSIAN, spec_from_dict
from .data import DataError
from .expfam import (
    LOG_2PI,
    beta_elog_array,
    dirichlet_elog_array,
    gamma_moments_array,
    kl_beta_array,
    kl_dirichlet_array,
    kl_gamma_array,
    kl_gaussian_array,
)

log = logging.getLogger(__name__)

POSTERIOR_VERSION = 1
_CHUNK_CELLS = 1 << 22
INIT_MODES = ("seeded", "noise")
_SEED_LLOYD_STEPS = 10
_SEED_TRIALS = 5
_SEED_WEIGHT = 0.9


class NumericError(RuntimeError):
    """Non-finite quantities during inference."""


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 200
    tol: float = 1e-6
    seed: int = 0
    noise: float = 0.1
    threads: int = 1
    init: str = "seeded"

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class FitReport:
    elbo: list = field(default_factory=list)
    sweeps: int = 0
    converged: bool = False
    sweep_seconds: list = field(default_factory=list)


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    var: np.ndarray
    shape: np.ndarray
    rate: np.ndarray


@dataclass
class DiscretePosterior:
    alpha: np.ndarray  # K x levels


@dataclass
class BernoulliPosterior:
    a: np.ndarray
    b: np.ndarray


@dataclass
class PosteriorState:
    resp: dict
    cpt: dict
    params: dict
    fk: dict

    def copy(self):
        def dup(p):
            return type(p)(**{k: v.copy() for k, v in vars(p).items()})
        return PosteriorState(
            {t: r.copy() for t, r in self.resp.items()},
            {t: c.copy() for t, c in self.cpt.items()},
            {t: {c: dup(p) for c, p in ps.items()} for t, ps in self.params.items()},
            {t: {c: q.copy() for c, q in fs.items()} for t, fs in self.fk.items()},
        )

    def same_as(self, other):
        """Bitwise equality of every posterior array."""
        def eq(a, b):
            return a.shape == b.shape and a.tobytes() == b.tobytes()
        if self.resp.keys() != other.resp.keys():
            return False
        for t in self.resp:
            if not (eq(self.resp[t], other.resp[t]) and eq(self.cpt[t], other.cpt[t])):
                return False
            if self.params[t].keys() != other.params[t].keys():
                return False
            for c, p in self.params[t].items():
                q = other.params[t][c]
                if type(p) is not type(q) or not all(eq(v, vars(q)[k]) for k, v in vars(p).items()):
                    return False
            if self.fk[t].keys() != other.fk[t].keys():
                return False
            if not all(eq(v, other.fk[t][c]) for c, v in self.fk[t].items()):
                return False
        return True


# -- plan -------------------------------------------------------------------


@dataclass
class _Edge:
    column: str
    parent: str
    k: int
    obs_rows: np.ndarray
    obs_parent: np.ndarray
    lat_rows: np.ndarray
    n_parent: int
    log_prior: np.ndarray | None  # n_lat x n_parent, 0 on candidates, -inf off


@dataclass
class _Attr:
    column: str
    family: str
    rows: np.ndarray
    x: np.ndarray
    levels: int
    prior: tuple


@dataclass
class _Table:
    name: str
    k: int
    n: int
    alpha: float
    edges: list
    attrs: list
    children: list = field(default_factory=list)  # (child, edge index), uncoupled
    coupled: list = field(default_factory=list)  # (child, [edge indices]) with >= 2 edges here


def _build_plan(spec, dataset, allow_empty=False):
    cap = spec.config.limits.fk_candidate_cap
    plan = {}
    for tm in spec.tables:
        tdata = dataset.table(tm.table)
        if tdata.n_rows == 0 and not allow_empty:
            raise DataError(f"table {tm.table!r} is empty")
        edges = []
        for pe in tm.gate.parent_edges:
            fk = tdata.fks[pe.column]
            n_parent = dataset.table(pe.parent).n_rows
            obs = np.flatnonzero(~fk.missing)
            lat = np.flatnonzero(fk.missing)
            log_prior = None
            if len(lat):
                if n_parent > cap:
                    r = lat[0]
                    raise DataError(
                        f"{tm.table} row {tdata.keys.keys[r]!r}, column {pe.column}: latent foreign key "
                        f"over {n_parent} {pe.parent} rows exceeds fk_candidate_cap={cap}")
                if n_parent == 0:
                    raise DataError(f"{tm.table}.{pe.column}: latent foreign key into empty table {pe.parent!r}")
                log_prior = np.zeros((len(lat), n_parent))
                # a row's observed links into the same parent table are not candidates
                for other in tm.gate.parent_edges:
                    if other.column == pe.column or other.parent != pe.parent:
                        continue
                    ofk = tdata.fks[other.column]
                    hit = ~ofk.missing[lat]
                    log_prior[np.flatnonzero(hit), ofk.values[lat[hit]]] = -np.inf
                n_cand = np.isfinite(log_prior).sum(axis=1)
                if np.any(n_cand == 0):
                    raise DataError(f"{tm.table}.{pe.column}: latent foreign key has no candidates")
                log_prior -= np.log(n_cand)[:, None]
            edges.append(_Edge(pe.column, pe.parent, pe.parent_k, obs, fk.values[obs].astype(np.int64),
                               lat, n_parent, log_prior))
        attrs = []
        for am in tm.attributes:
            col = tdata.attrs[am.column]
            rows = np.flatnonzero(~col.missing)
            x = col.values[rows]
            if am.family == DISCRETE:
                x = x.astype(np.int64)
                if len(x) and x.max() >= (am.levels or 2):
                    raise DataError(f"{tm.table}.{am.column}: level code {x.max()} outside the model's "
                                    f"{am.levels or 2} levels; compile against the loaded dataset's schema")
            elif am.family == BERNOULLI:
                x = x.astype(bool)
            else:
                x = x.astype(float)
            attrs.append(_Attr(am.column, am.family, rows, x, am.levels or 2, am.prior))
        plan[tm.table] = _Table(tm.table, tm.k, tdata.n_rows, tm.gate.alpha, edges, attrs)
    for tm in spec.tables:
        by_parent = {}
        for i, e in enumerate(plan[tm.table].edges):
            by_parent.setdefault(e.parent, []).append(i)
        for parent, idx in by_parent.items():
            if len(idx) == 1:
                plan[parent].children.append((tm.table, idx[0]))
            else:
                plan[parent].coupled.append((tm.table, idx))
    return plan


# -- tensor helpers -----------------------------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwx"


def _chunks(n, width):
    step = max(1, _CHUNK_CELLS // max(width, 1))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


def _contract(T, Qs, keep):
    """Contract axes 1..m of T (b, K1..Km[, ...]) with per-row vectors Qs.

    Axes listed in ``keep`` are left open (in order); trailing axes beyond m
    are always kept.
    """
    m = len(Qs)
    extra = T.ndim - 1 - m
    axes = _LETTERS[:m]
    tail = _LETTERS[m:m + extra]
    operands, subs = [T], ["y" + axes + tail]
    for e in range(m):
        if e not in keep:
            operands.append(Qs[e])
            subs.append("y" + axes[e])
    out = "y" + "".join(axes[e] for e in keep) + tail
    return np.einsum(",".join(subs) + "->" + out, *operands)


# -- engine -----------------------------------------------------------------


class VMP:
    """Coordinate-ascent updates for one (spec, dataset) pair."""

    def __init__(self, spec, dataset, config=None, allow_empty=False):
        self.spec = spec
        self.dataset = dataset
        self.config = config or FitConfig()
        self.plan = _build_plan(spec, dataset, allow_empty)
        self.order = spec.order
        self._pool = ThreadPoolExecutor(self.config.threads) if self.config.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # state ----------------------------------------------------------------

    def init_state(self):
        rng = np.random.default_rng(self.config.seed)
        amp = self.config.noise
        resp, cpt, params, fk = {}, {}, {}, {}
        for name in self.order:
            p = self.plan[name]
            r = 1.0 / p.k + rng.uniform(0.0, amp / p.k, size=(p.n, p.k))
            resp[name] = r / r.sum(axis=1, keepdims=True)
            configs = 1
            for e in p.edges:
                configs *= e.k
            cpt[name] = np.full((configs, p.k), p.alpha)
            params[name] = {a.column: _prior_posterior(a, p.k) for a in p.attrs}
            fk[name] = {}
            for e in p.edges:
                if len(e.lat_rows):
                    fk[name][e.column] = np.exp(e.log_prior)
        return PosteriorState(resp, cpt, params, fk)

    def seed_responsibilities(self, state):
        """Blend the noisy responsibilities with a k-means++ partition of each
        table's rows, parents first.

        A row's features are its real-valued attributes when it has any,
        else its other attributes, else its parents' responsibilities; a root
        table without attributes uses, per incoming edge, the mean attributes
        of the child rows referencing it. Row-level noise alone averages out in the sufficient
        statistics, leaving every component near the global mean.
        """
        rng = np.random.default_rng([self.config.seed, 1])
        for name in self.order:
            p = self.plan[name]
            X = self._seed_features(state, name)
            if X.shape[1] == 0 or p.k == 1 or p.n == 0:
                continue
            labels = _kmeans(X, p.k, rng)
            R = state.resp[name] * (1.0 - _SEED_WEIGHT)
            R[np.arange(p.n), labels] += _SEED_WEIGHT
            state.resp[name] = R

    def _attr_features(self, table):
        p = self.plan[table]
        blocks = []
        # 0/1 indicator columns swamp well-separated real clusters; prefer reals
        real = [a for a in p.attrs if a.family == GAUSSIAN and len(a.x)]
        for a in real or p.attrs:
            if a.family == GAUSSIAN:
                col = np.full((p.n, 1), np.nan)
                if len(a.x):
                    sd = a.x.std()
                    col[a.rows, 0] = (a.x - a.x.mean()) / (sd if sd > 0 else 1.0)
            else:
                width = a.levels if a.family == DISCRETE else 1
                col = np.full((p.n, width), np.nan)
                col[a.rows] = 0.0
                if a.family == DISCRETE:
                    col[a.rows, a.x] = 1.0
                else:
                    col[a.rows, 0] = a.x
            blocks.append(col)
        return np.hstack(blocks) if blocks else np.zeros((p.n, 0))

    def _seed_features(self, state, table):
        p = self.plan[table]
        blocks = [self._attr_features(table)]
        if not p.attrs:
            blocks += [self.edge_marginal(state, table, i) for i in range(len(p.edges))]
        for child in self.order if not p.attrs and not p.edges else ():
            cp = self.plan[child]
            feats = self._attr_features(child)
            if feats.shape[1] == 0:
                continue
            for e in cp.edges:
                if e.parent != table:
                    continue
                ok = ~np.isnan(feats[e.obs_rows])
                sums = np.zeros((p.n, feats.shape[1]))
                counts = np.zeros_like(sums)
                np.add.at(sums, e.obs_parent, np.where(ok, feats[e.obs_rows], 0.0))
                np.add.at(counts, e.obs_parent, ok)
                blocks.append(np.divide(sums, counts, out=np.full_like(sums, np.nan), where=counts > 0))
        X = np.hstack(blocks)
        # missing features take the column mean
        means = np.array([np.nanmean(c) if np.any(~np.isnan(c)) else 0.0 for c in X.T])
        X = np.where(np.isnan(X), means, X)
        return X[:, X.std(axis=0) > 0] if X.shape[0] else X

    # marginals --------------------------------------------------------------

    def edge_marginal(self, state, table, i):
        e = self.plan[table].edges[i]
        R_parent = state.resp[e.parent]
        Q = np.empty((self.plan[table].n, e.k))
        Q[e.obs_rows] = R_parent[e.obs_parent]
        if len(e.lat_rows):
            Q[e.lat_rows] = state.fk[table][e.column] @ R_parent
        return Q

    def marginals(self, state, table):
        return [self.edge_marginal(state, table, i) for i in range(len(self.plan[table].edges))]

    def _elog_cpt(self, state, table):
        p = self.plan[table]
        elog = dirichlet_elog_array(state.cpt[table])
        return elog.reshape(tuple(e.k for e in p.edges) + (p.k,))

    def gate_term(self, state, table, Qs=None, rows=None):
        """E[log pi(c | parent config)] per row: (n, K)."""
        p = self.plan[table]
        elog = self._elog_cpt(state, table)
        n = p.n if rows is None else len(rows)
        if not p.edges:
            return np.broadcast_to(elog, (n, p.k)).copy()
        if Qs is None:
            Qs = self.marginals(state, table)
        if rows is not None:
            Qs = [Q[rows] for Q in Qs]
        out = np.empty((n, p.k))
        K1 = p.edges[0].k
        flat = elog.reshape(K1, -1)
        for lo, hi in _chunks(n, flat.shape[1]):
            A = Qs[0][lo:hi] @ flat
            for i, e in enumerate(p.edges[1:], start=1):
                A = np.einsum("yar,ya->yr", A.reshape(hi - lo, e.k, -1), Qs[i][lo:hi])
            out[lo:hi] = A
        return out

    def attribute_scores(self, state, table, attr):
        """Expected log-likelihood of each observed cell under each component."""
        post = state.params[table][attr.column]
        if attr.family == GAUSSIAN:
            e_tau, e_log_tau = gamma_moments_array(post.shape, post.rate)
            x = attr.x[:, None]
            sq = x * x - 2.0 * x * post.mean + (post.mean * post.mean + post.var)
            return 0.5 * (e_log_tau - LOG_2PI - e_tau * sq)
        if attr.family == DISCRETE:
            return dirichlet_elog_array(post.alpha).T[attr.x]
        e_log_p, e_log_q = beta_elog_array(post.a, post.b)
        return np.where(attr.x[:, None], e_log_p, e_log_q)

    def attribute_term(self, state, table):
        p = self.plan[table]
        out = np.zeros((p.n, p.k))
        for a in p.attrs:
            out[a.rows] += self.attribute_scores(state, table, a)
        return out

    def edge_messages(self, state, table, i, rows=None, Qs=None):
        """Message to the parent of edge ``i`` from child rows: (b, K_parent).

        sum_c R[r, c] * sum over the other edges' configs of their marginals
        times E[log pi(c | config)].
        """
        p = self.plan[table]
        if Qs is None:
            Qs = self.marginals(state, table)
        R = state.resp[table]
        if rows is not None:
            R = R[rows]
            Qs = [Q[rows] for Q in Qs]
        elog = self._elog_cpt(state, table)
        shape = tuple(e.k for e in p.edges)
        flat = elog.reshape(-1, p.k)
        n = R.shape[0]
        out = np.empty((n, p.edges[i].k))
        if len(p.edges) == 1:
            return R @ flat.T
        for lo, hi in _chunks(n, flat.shape[0]):
            W = (R[lo:hi] @ flat.T).reshape((hi - lo,) + shape)
            out[lo:hi] = _contract(W, [Q[lo:hi] for Q in Qs], [i])
        return out

    def child_messages(self, state, table):
        """Summed messages into ``table`` rows from uncoupled child edges."""
        p = self.plan[table]
        out = np.zeros((p.n, p.k))
        for child, i in p.children:
            e = self.plan[child].edges[i]
            Qs = self.marginals(state, child) if len(self.plan[child].edges) > 1 else None
            if len(e.obs_rows):
                M = self.edge_messages(state, child, i, e.obs_rows, Qs)
                kernels.scatter_add_rows(out, e.obs_parent, np.ascontiguousarray(M))
            if len(e.lat_rows):
                M = self.edge_messages(state, child, i, e.lat_rows, Qs)
                out += state.fk[child][e.column].T @ M
        return out

    # updates ----------------------------------------------------------------

    def update_responsibilities(self, state, table):
        p = self.plan[table]
        if p.n == 0:
            return state.resp[table]
        logits = self._row_logits(state, table)
        logits += self.child_messages(state, table)
        if p.coupled:
            R = np.ascontiguousarray(state.resp[table])
            kernels.coupled_sweep(R, np.ascontiguousarray(logits), *self._coupled_args(state, table))
        else:
            R = kernels.softmax_rows(np.ascontiguousarray(logits))
        if not np.all(np.isfinite(R)):
            raise NumericError(f"non-finite responsibilities in table {table!r}")
        state.resp[table] = R
        return R

    def _row_logits(self, state, table):
        p = self.plan[table]
        Qs = self.marginals(state, table) if p.edges else None
        if self._pool is None or p.n < 2 * self.config.threads:
            return self.gate_term(state, table, Qs) + self.attribute_term(state, table)
        bounds = np.linspace(0, p.n, self.config.threads + 1).astype(int)
        out = np.empty((p.n, p.k))

        def work(lo, hi):
            rows = np.arange(lo, hi)
            block = self.gate_term(state, table, Qs, rows)
            for a in p.attrs:
                s, t = np.searchsorted(a.rows, [lo, hi])
                if t > s:
                    sub = _Attr(a.column, a.family, a.rows[s:t], a.x[s:t], a.levels, a.prior)
                    block[a.rows[s:t] - lo] += self.attribute_scores(state, table, sub)
            out[lo:hi] = block

        list(self._pool.map(lambda b: work(*b), zip(bounds[:-1], bounds[1:])))
        return out

    def _coupled_args(self, state, table):
        p = self.plan[table]
        groups, inc, lat = [], [], []
        qf_blocks = []
        for g, (child, idx) in enumerate(p.coupled):
            cp = self.plan[child]
            Qs = self.marginals(state, child)
            elog = self._elog_cpt(state, child)
            shape = tuple(e.k for e in cp.edges)
            W = (state.resp[child] @ elog.reshape(-1, cp.k).T).reshape((cp.n,) + shape)
            W = _contract(W, Qs, idx).reshape(cp.n, -1)
            Q = np.stack([Qs[i] for i in idx])
            groups.append((np.ascontiguousarray(W), np.ascontiguousarray(Q), len(idx)))
            for pos, i in enumerate(idx):
                e = cp.edges[i]
                inc.append(np.stack([e.obs_parent, np.full(len(e.obs_rows), g),
                                     np.full(len(e.obs_rows), pos), e.obs_rows], axis=1))
                if len(e.lat_rows):
                    lat.append(np.stack([np.full(len(e.lat_rows), g), np.full(len(e.lat_rows), pos),
                                         e.lat_rows], axis=1))
                    qf_blocks.append(state.fk[child][e.column])
        inc = np.concatenate(inc).astype(np.int64)
        inc = inc[np.lexsort((inc[:, 3], inc[:, 2], inc[:, 1], inc[:, 0]))]
        ptr = np.zeros(p.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(inc[:, 0], minlength=p.n), out=ptr[1:])
        lat = np.concatenate(lat).astype(np.int64) if lat else np.zeros((0, 3), dtype=np.int64)
        qf = np.ascontiguousarray(np.concatenate(qf_blocks)) if qf_blocks else np.zeros((0, p.n))
        col = np.ascontiguousarray
        return (groups, ptr, col(inc[:, 1]), col(inc[:, 2]), col(inc[:, 3]),
                col(lat[:, 0]), col(lat[:, 1]), col(lat[:, 2]), qf)

    def update_fk_posteriors(self, state, table):
        p = self.plan[table]
        if not any(len(e.lat_rows) for e in p.edges):
            return state.fk[table]
        Qs = self.marginals(state, table)
        for i, e in enumerate(p.edges):
            if not len(e.lat_rows):
                continue
            M = self.edge_messages(state, table, i, e.lat_rows, Qs)
            logits = M @ state.resp[e.parent].T + e.log_prior
            q = kernels.softmax_rows(np.ascontiguousarray(logits))
            state.fk[table][e.column] = q
            Qs[i] = self.edge_marginal(state, table, i)
        return state.fk[table]

    def gate_statistics(self, state, table, Qs=None):
        """sum_i q(parent config of row i = s) * R[i, c]: (configs, K)."""
        p = self.plan[table]
        R = state.resp[table]
        if not p.edges:
            return R.sum(axis=0, keepdims=True)
        if Qs is None:
            Qs = self.marginals(state, table)
        configs = 1
        for e in p.edges:
            configs *= e.k
        stats = np.zeros((configs, p.k))
        for lo, hi in _chunks(p.n, configs):
            O = Qs[0][lo:hi]
            for Q in Qs[1:]:
                O = (O[:, :, None] * Q[lo:hi, None, :]).reshape(hi - lo, -1)
            stats += O.T @ R[lo:hi]
        return stats

    def update_gate_cpt(self, state, table):
        p = self.plan[table]
        state.cpt[table] = p.alpha + self.gate_statistics(state, table)
        return state.cpt[table]

    def update_attribute_params(self, state, table):
        p = self.plan[table]
        R = state.resp[table]
        for a in p.attrs:
            post = state.params[table][a.column]
            Rr = R[a.rows]
            if a.family == GAUSSIAN:
                m0, p0, a0, b0 = a.prior
                N = Rr.sum(axis=0)
                S = a.x @ Rr
                SS = (a.x * a.x) @ Rr
                e_tau = post.shape / post.rate
                prec = p0 + e_tau * N
                post.mean = (p0 * m0 + e_tau * S) / prec
                post.var = 1.0 / prec
                post.shape = a0 + 0.5 * N
                post.rate = b0 + 0.5 * (SS - 2.0 * post.mean * S + (post.mean ** 2 + post.var) * N)
            elif a.family == DISCRETE:
                counts = np.zeros((a.levels, p.k))
                kernels.scatter_add_rows(counts, a.x, np.ascontiguousarray(Rr))
                post.alpha = a.prior[0] + counts.T
            else:
                post.a = a.prior[0] + a.x.astype(float) @ Rr
                post.b = a.prior[1] + (~a.x).astype(float) @ Rr
        return state.params[table]

    # objective --------------------------------------------------------------

    def elbo_terms(self, state):
        """ELBO contributions keyed by (table, kind)."""
        terms = {}
        for name in self.order:
            p = self.plan[name]
            R = state.resp[name]
            terms[(name, "gate")] = float(np.sum(R * self.gate_term(state, name))) if p.n else 0.0
            ll = 0.0
            for a in p.attrs:
                if len(a.rows):
                    ll += float(np.sum(R[a.rows] * self.attribute_scores(state, name, a)))
            terms[(name, "loglik")] = ll
            terms[(name, "entropy")] = float(-np.sum(xlogy(R, R)))
            prior = np.full(p.k, p.alpha)
            kl = float(np.sum(kl_dirichlet_array(prior, state.cpt[name])))
            for a in p.attrs:
                kl += _attribute_kl(a, state.params[name][a.column])
            terms[(name, "kl_params")] = -kl
            fk_kl = 0.0
            for e in p.edges:
                if len(e.lat_rows):
                    q = state.fk[name][e.column]
                    finite = np.isfinite(e.log_prior)
                    fk_kl += float(np.sum(xlogy(q, q)) - np.sum(q[finite] * e.log_prior[finite]))
            terms[(name, "kl_fk")] = -fk_kl
        return terms

    def compute_elbo(self, state):
        value = sum(self.elbo_terms(state).values())
        if not np.isfinite(value):
            raise NumericError("ELBO is not finite")
        return value

    # driver -----------------------------------------------------------------

    def update_parameters(self, state):
        for name in self.order:
            self.update_gate_cpt(state, name)
            self.update_attribute_params(state, name)

    def sweep(self, state):
        for name in self.order:
            self.update_responsibilities(state, name)
        for name in self.order:
            self.update_fk_posteriors(state, name)
        self.update_parameters(state)

    def fit(self, state=None):
        cfg = self.config
        if state is None:
            state = self.init_state()
            if cfg.init == "seeded":
                self.seed_responsibilities(state)
            # break label symmetry: parameters from the initial responsibilities
            self.update_parameters(state)
        report = FitReport()
        prev = None
        for sweep in range(cfg.max_sweeps):
            t0 = time.perf_counter()
            self.sweep(state)
            elbo = self.compute_elbo(state)
            report.sweep_seconds.append(time.perf_counter() - t0)
            report.elbo.append(elbo)
            report.sweeps = sweep + 1
            log.info("sweep %d elbo %.10g", sweep + 1, elbo)
            if prev is not None and abs(elbo - prev) <= cfg.tol * abs(prev):
                report.converged = True
                break
            prev = elbo
        return state, report


def _kmeans(X, k, rng):
    """Best of several k-means++ seedings, each refined by a few Lloyd steps."""
    best, best_cost = None, np.inf
    sq = (X * X).sum(axis=1)
    for _ in range(_SEED_TRIALS):
        n = X.shape[0]
        centers = [X[rng.integers(n)]]
        d2 = ((X - centers[0]) ** 2).sum(axis=1)
        for _ in range(1, k):
            total = d2.sum()
            idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
            centers.append(X[idx])
            d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
        C = np.array(centers)
        for _ in range(_SEED_LLOYD_STEPS):
            labels = np.argmin(sq[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :], axis=1)
            for c in range(k):
                member = labels == c
                if member.any():
                    C[c] = X[member].mean(axis=0)
        dist = sq[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
        labels = np.argmin(dist, axis=1)
        cost = dist[np.arange(n), labels].sum()
        if cost < best_cost:
            best, best_cost = labels, cost
    return best


def _prior_posterior(attr, k):
    if attr.family == GAUSSIAN:
        m0, p0, a0, b0 = attr.prior
        return GaussianPosterior(np.full(k, m0), np.full(k, 1.0 / p0), np.full(k, a0), np.full(k, b0))
    if attr.family == DISCRETE:
        return DiscretePosterior(np.full((k, attr.levels), attr.prior[0]))
    return BernoulliPosterior(np.full(k, attr.prior[0]), np.full(k, attr.prior[1]))


def _attribute_kl(attr, post):
    if attr.family == GAUSSIAN:
        m0, p0, a0, b0 = attr.prior
        return float(np.sum(kl_gaussian_array(m0, p0, post.mean, post.var))
                     + np.sum(kl_gamma_array(a0, b0, post.shape, post.rate)))
    if attr.family == DISCRETE:
        return float(np.sum(kl_dirichlet_array(np.full(post.alpha.shape[1], attr.prior[0]), post.alpha)))
    return float(np.sum(kl_beta_array(attr.prior[0], attr.prior[1], post.a, post.b)))


# -- functional surface -----------------------------------------------------


def init_state(spec, dataset, config=None, allow_empty=False):
    return VMP(spec, dataset, config, allow_empty).init_state()


def update_responsibilities(state, spec, dataset, table):
    return VMP(spec, dataset, allow_empty=True).update_responsibilities(state, table)


def update_gate_cpt(state, spec, dataset, table):
    return VMP(spec, dataset, allow_empty=True).update_gate_cpt(state, table)


def update_attribute_params(state, spec, dataset, table):
    return VMP(spec, dataset, allow_empty=True).update_attribute_params(state, table)


def update_fk_posteriors(state, spec, dataset, table):
    return VMP(spec, dataset, allow_empty=True).update_fk_posteriors(state, table)


def compute_elbo(state, spec, dataset):
    return VMP(spec, dataset, allow_empty=True).compute_elbo(state)


def fit(spec, dataset, config=None):
    vmp = VMP(spec, dataset, config)
    try:
        return vmp.fit()
    finally:
        vmp.close()


# -- posterior file -----------------------------------------------------------


def _arr(a):
    return np.asarray(a).tolist()


def posterior_to_dict(state, spec, dataset, include_resp=True):
    tables = {}
    for tm in spec.tables:
        name = tm.table
        attrs = {}
        for c, post in state.params[name].items():
            attrs[c] = {k: _arr(v) for k, v in vars(post).items()}
        entry = {"cpt": _arr(state.cpt[name]), "attributes": attrs}
        if include_resp:
            entry["resp"] = _arr(state.resp[name])
            tdata = dataset.table(name)
            entry["fk"] = {c: {"rows": _arr(np.flatnonzero(tdata.fks[c].missing)), "probs": _arr(q)}
                           for c, q in state.fk[name].items()}
        tables[name] = entry
    return {
        "posterior_version": POSTERIOR_VERSION,
        "spec": spec.to_dict(),
        "transforms": {f"{t}.{c}": [tr.mean, tr.scale] for (t, c), tr in sorted(dataset.transforms.items())},
        "levels": {f"{t.name}.{c}": list(levels) for t in (dataset.table(n) for n in spec.order)
                   for c, levels in sorted(t.levels.items())},
        "keys": {name: list(dataset.table(name).keys.keys) for name in spec.order},
        "tables": tables,
    }


def save_posterior(path, state, spec, dataset, include_resp=True):
    text = json.dumps(posterior_to_dict(state, spec, dataset, include_resp), sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


@dataclass
class LoadedPosterior:
    spec: object
    state: PosteriorState
    transforms: dict
    levels: dict
    keys: dict
    has_resp: bool


_FAMILY_CLASS = {GAUSSIAN: GaussianPosterior, DISCRETE: DiscretePosterior, BERNOULLI: BernoulliPosterior}


def load_posterior(path):
    from .data import KeyIndex, Transform

    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("posterior_version") != POSTERIOR_VERSION:
        raise DataError(f"{path}: unsupported posterior_version {doc.get('posterior_version')!r}")
    spec = spec_from_dict(doc["spec"])
    resp, cpt, params, fk = {}, {}, {}, {}
    has_resp = True
    for tm in spec.tables:
        entry = doc["tables"][tm.table]
        cpt[tm.table] = np.array(entry["cpt"], dtype=float)
        params[tm.table] = {
            a.column: _FAMILY_CLASS[a.family](**{k: np.array(v, dtype=float)
                                                 for k, v in entry["attributes"][a.column].items()})
            for a in tm.attributes}
        if "resp" in entry:
            resp[tm.table] = np.array(entry["resp"], dtype=float).reshape(-1, tm.k)
            fk[tm.table] = {c: np.array(v["probs"], dtype=float) for c, v in entry["fk"].items()}
        else:
            has_resp = False
            fk[tm.table] = {}
    transforms = {tuple(k.split(".", 1)): Transform(*v) for k, v in doc["transforms"].items()}
    levels = {tuple(k.split(".", 1)): tuple(v) for k, v in doc["levels"].items()}
    keys = {t: KeyIndex(tuple(v)) for t, v in doc["keys"].items()}
    return LoadedPosterior(spec, PosteriorState(resp, cpt, params, fk), transforms, levels, keys, has_resp)
