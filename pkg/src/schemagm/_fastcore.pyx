# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``schemagm._purecore``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, isnan, NAN

cnp.import_array()


cdef inline double _psi(double x) nogil:
    cdef double acc = 0.0, f, poly
    if isnan(x) or x <= 0.0:
        return NAN
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    poly = 1.0 / 12.0
    poly = -691.0 / 32760.0 + f * poly
    poly = 1.0 / 132.0 + f * poly
    poly = -1.0 / 240.0 + f * poly
    poly = 1.0 / 252.0 + f * poly
    poly = -1.0 / 120.0 + f * poly
    poly = 1.0 / 12.0 + f * poly
    return acc + log(x) - 0.5 / x - f * poly


def digamma(x):
    arr = np.array(x, dtype=np.float64, copy=True)
    scalar = arr.ndim == 0
    flat = np.ascontiguousarray(arr.reshape(-1))
    cdef double[::1] v = flat
    cdef Py_ssize_t i, n = v.shape[0]
    with nogil:
        for i in range(n):
            v[i] = _psi(v[i])
    if scalar:
        return flat[0]
    return flat.reshape(arr.shape)


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] index, double[:, ::1] values):
    cdef Py_ssize_t r, k, n = index.shape[0], K = out.shape[1]
    cdef cnp.int64_t j
    with nogil:
        for r in range(n):
            j = index[r]
            for k in range(K):
                out[j, k] += values[r, k]
    return np.asarray(out)


def softmax_rows(double[:, ::1] logits):
    cdef Py_ssize_t i, k, n = logits.shape[0], K = logits.shape[1]
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = logits[i, 0]
            for k in range(1, K):
                if logits[i, k] > mx:
                    mx = logits[i, k]
            s = 0.0
            for k in range(K):
                logits[i, k] = exp(logits[i, k] - mx)
                s += logits[i, k]
            for k in range(K):
                logits[i, k] /= s
    return np.asarray(logits)


cdef void _edge_message(const double* W, const double* Q, Py_ssize_t nrow,
                        Py_ssize_t row, Py_ssize_t edge, Py_ssize_t m,
                        Py_ssize_t K, double weight, double* msg) noexcept nogil:
    # W: n x K**m (row-major, first edge most significant); Q: m x n x K
    cdef Py_ssize_t C = 1, s, e, rem, digit, keep
    cdef double p
    for e in range(m):
        C *= K
    for s in range(C):
        rem = s
        p = W[row * C + s]
        keep = 0
        for e in range(m - 1, -1, -1):
            digit = rem % K
            rem = rem // K
            if e == edge:
                keep = digit
            else:
                p *= Q[(e * nrow + row) * K + digit]
        msg[keep] += weight * p


def coupled_sweep(double[:, ::1] R, double[:, ::1] base, groups,
                  cnp.int64_t[::1] inc_ptr, cnp.int64_t[::1] inc_group,
                  cnp.int64_t[::1] inc_edge, cnp.int64_t[::1] inc_row,
                  cnp.int64_t[::1] lat_group, cnp.int64_t[::1] lat_edge,
                  cnp.int64_t[::1] lat_row, qf):
    cdef Py_ssize_t n = R.shape[0], K = R.shape[1]
    cdef Py_ssize_t G = len(groups), g, j, t, l, k, L = lat_row.shape[0]
    cdef list Ws = [], Qs = []
    cdef cnp.int64_t[::1] ms = np.zeros(max(G, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] nrows = np.zeros(max(G, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] w_off = np.zeros(max(G, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] q_off = np.zeros(max(G, 1), dtype=np.int64)
    cdef Py_ssize_t wtot = 0, qtot = 0
    for g in range(G):
        W, Q, m = groups[g]
        Ws.append(np.ascontiguousarray(W, dtype=np.float64).reshape(-1))
        Qs.append(np.ascontiguousarray(Q, dtype=np.float64).reshape(-1))
        ms[g] = m
        nrows[g] = Q.shape[1]
        w_off[g] = wtot
        q_off[g] = qtot
        wtot += Ws[g].shape[0]
        qtot += Qs[g].shape[0]
    cdef double[::1] Wflat = np.concatenate(Ws) if G else np.zeros(1)
    cdef double[::1] Qflat = np.concatenate(Qs) if G else np.zeros(1)
    cdef double[:, ::1] qfv = (np.ascontiguousarray(qf, dtype=np.float64)
                               if L else np.zeros((1, 1)))
    cdef double[::1] msg = np.empty(K), delta = np.empty(K)
    cdef double mx, s, w
    cdef Py_ssize_t row, e, qo
    with nogil:
        for j in range(n):
            for k in range(K):
                msg[k] = base[j, k]
            for t in range(inc_ptr[j], inc_ptr[j + 1]):
                g = inc_group[t]
                _edge_message(&Wflat[w_off[g]], &Qflat[q_off[g]], nrows[g],
                              inc_row[t], inc_edge[t], ms[g], K, 1.0, &msg[0])
            for l in range(L):
                w = qfv[l, j]
                if w != 0.0:
                    g = lat_group[l]
                    _edge_message(&Wflat[w_off[g]], &Qflat[q_off[g]], nrows[g],
                                  lat_row[l], lat_edge[l], ms[g], K, w, &msg[0])
            mx = msg[0]
            for k in range(1, K):
                if msg[k] > mx:
                    mx = msg[k]
            s = 0.0
            for k in range(K):
                msg[k] = exp(msg[k] - mx)
                s += msg[k]
            for k in range(K):
                msg[k] /= s
                delta[k] = msg[k] - R[j, k]
                R[j, k] = msg[k]
            for t in range(inc_ptr[j], inc_ptr[j + 1]):
                g = inc_group[t]
                qo = q_off[g] + (inc_edge[t] * nrows[g] + inc_row[t]) * K
                for k in range(K):
                    Qflat[qo + k] = msg[k]
            for l in range(L):
                w = qfv[l, j]
                if w != 0.0:
                    g = lat_group[l]
                    qo = q_off[g] + (lat_edge[l] * nrows[g] + lat_row[l]) * K
                    for k in range(K):
                        Qflat[qo + k] += w * delta[k]
    Qarr = np.asarray(Qflat)
    for g in range(G):
        Q = groups[g][1]
        Q[...] = Qarr[q_off[g]:q_off[g] + Qs[g].shape[0]].reshape(Q.shape)
    return np.asarray(R)
