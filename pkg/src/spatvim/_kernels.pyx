# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops; see ``_kernels_py`` for the reference NumPy versions."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def split_scan(const cnp.int64_t[::1] rows, const double[::1] xs, const double[::1] g,
               const double[:, ::1] P, const double[:, ::1] B, Py_ssize_t min_leaf):
    """Best GLS split of one node along one sorted covariate.

    Returns ``(gain, pos)``; the left child is ``rows[:pos + 1]``. ``pos`` is
    -1 when no admissible split exists.
    """
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t nb = B.shape[0]
    cdef Py_ssize_t k, t, b, idx, nl
    cdef double a = 0.0, q = 0.0, s, vv, denom, gain
    cdef double best = 0.0
    cdef Py_ssize_t best_pos = -1
    cdef double[::1] v = np.zeros(nb, dtype=np.float64)
    for k in range(m - 1):
        idx = rows[k]
        a += g[idx]
        s = 0.0
        for t in range(k):
            s += P[idx, rows[t]]
        q += 2.0 * s + P[idx, idx]
        for b in range(nb):
            v[b] += B[b, idx]
        nl = k + 1
        if nl < min_leaf or m - nl < min_leaf:
            continue
        if not xs[k + 1] > xs[k]:
            continue
        vv = 0.0
        for b in range(nb):
            vv += v[b] * v[b]
        denom = q - vv
        if denom <= 1e-12 * q:
            continue
        gain = a * a / denom
        if gain > best:
            best = gain
            best_pos = k
    return best, best_pos


def tree_predict(const double[:, :] X, const cnp.int64_t[::1] feature,
                 const double[::1] threshold, const cnp.int64_t[::1] left,
                 const cnp.int64_t[::1] right, const double[::1] value):
    """Route every row of ``X`` to its leaf and return the leaf values."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t i, node
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        o[i] = value[node]
    return out


def loo_apply(const double[:, ::1] A, const double[:, ::1] R):
    """``out[i] = sum_{j != i} A[i, j] * R[j]``, never reading ``R[i]`` for row i."""
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t c = R.shape[1]
    cdef Py_ssize_t i, j, col
    cdef double w
    if np.isfinite(np.asarray(R)).all():
        # no row can poison another, so a BLAS product with a zeroed diagonal is exact
        A0 = np.array(A, dtype=np.float64)
        np.fill_diagonal(A0, 0.0)
        return A0 @ np.asarray(R)
    out = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            w = A[i, j]
            for col in range(c):
                o[i, col] += w * R[j, col]
    return out
