"""Pure-Python/numpy implementations of the hot kernels.

Used when the compiled ``_fastcore`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""
import numpy as np

# Asymptotic-series coefficients B_2n / (2n), applied to 1/x^2n.
_PSI_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_PSI_SHIFT = 10.0


def digamma(x):
    """Digamma for positive reals, elementwise.

    Shifts every argument above 10 with psi(x) = psi(x + 1) - 1/x and then
    applies the Stirling-type asymptotic series.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    acc = np.zeros_like(x)
    small = x < _PSI_SHIFT
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _PSI_SHIFT
    f = 1.0 / (x * x)
    poly = np.full_like(x, _PSI_SERIES[-1])
    for coef in _PSI_SERIES[-2::-1]:
        poly = coef + f * poly
    out = acc + np.log(x) - 0.5 / x - f * poly
    out[np.isnan(x)] = np.nan
    return out[0] if scalar else out


def scatter_add_rows(out, index, values):
    """out[index[r], :] += values[r, :] for every r (duplicates accumulate)."""
    if len(index) == 0:
        return out
    n = out.shape[0]
    for k in range(out.shape[1]):
        out[:, k] += np.bincount(index, weights=values[:, k], minlength=n)
    return out


def softmax_rows(logits):
    """Normalize each row of log-weights in place; returns the array."""
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def _edge_messages(W, Q, rows, edge, m, K):
    """Messages to the parent through ``edge`` for child rows ``rows``.

    W holds per-row child weights over the K**m coupled configurations,
    Q the live edge marginals (m x n_child x K).
    """
    letters = "abcdefghij"[:m]
    operands = [W[rows].reshape((len(rows),) + (K,) * m)]
    subs = ["z" + letters]
    for e in range(m):
        if e != edge:
            operands.append(Q[e, rows])
            subs.append("z" + letters[e])
    return np.einsum(",".join(subs) + "->z" + letters[edge], *operands)


def coupled_sweep(R, base, groups, inc_ptr, inc_group, inc_edge, inc_row,
                  lat_group, lat_edge, lat_row, qf):
    """Sequential (Gauss-Seidel) responsibility update of a parent table.

    Each parent row j gets logits ``base[j]`` plus messages from child rows
    whose two or more FKs into this table couple parent rows together; the
    row is normalized and every edge marginal that reads it is refreshed
    before row j + 1 is visited.

    ``groups`` is a list of (W, Q, m) per coupled child table. Observed
    incidences of row j are inc_*[inc_ptr[j]:inc_ptr[j + 1]]; latent FK
    cells are listed in lat_* with dense posteriors ``qf`` (L x n_parent).
    """
    n, K = R.shape
    segments = [(g, e) for g, (_, _, m) in enumerate(groups) for e in range(m)]
    lat_sel = [np.flatnonzero((lat_group == g) & (lat_edge == e)) for g, e in segments]
    for j in range(n):
        msg = base[j].copy()
        lo, hi = inc_ptr[j], inc_ptr[j + 1]
        g_j, e_j, r_j = inc_group[lo:hi], inc_edge[lo:hi], inc_row[lo:hi]
        obs_rows = []
        lat_hits = []
        for (g, e), sel in zip(segments, lat_sel):
            W, Q, m = groups[g]
            rows = r_j[(g_j == g) & (e_j == e)]
            obs_rows.append(rows)
            if len(rows):
                msg += _edge_messages(W, Q, rows, e, m, K).sum(axis=0)
            w = qf[sel, j] if len(sel) else sel
            hit = np.flatnonzero(w)
            lat_hits.append((sel[hit], w[hit]))
            if len(hit):
                msg += w[hit] @ _edge_messages(W, Q, lat_row[sel[hit]], e, m, K)
        new = np.exp(msg - msg.max())
        new /= new.sum()
        delta = new - R[j]
        R[j] = new
        for (g, e), rows, (cells, w) in zip(segments, obs_rows, lat_hits):
            Q = groups[g][1]
            Q[e, rows] = new
            if len(cells):
                Q[e, lat_row[cells]] += w[:, None] * delta
    return R
