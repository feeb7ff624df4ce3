"""NumPy implementations of the hot loops (fallback and reference)."""
import numpy as np


def split_scan(rows, xs, g, P, B, min_leaf):
    """Best GLS split of one node along one sorted covariate.

    For each prefix ``c`` of ``rows`` the gain is
    ``(c'g)^2 / (c'Pc - |Bc|^2)``, the drop in the whitened residual sum of
    squares when the node is split into ``c`` and its complement.

    Returns ``(gain, pos)``; the left child is ``rows[:pos + 1]`` and ``pos``
    is -1 when no admissible split exists.
    """
    m = rows.shape[0]
    if m < 2:
        return 0.0, -1
    a = np.cumsum(g[rows])[:-1]
    sub = P[np.ix_(rows, rows)]
    q = np.diagonal(np.cumsum(np.cumsum(sub, axis=0), axis=1))[:-1]
    V = np.cumsum(B[:, rows], axis=1)[:, :-1]
    denom = q - np.einsum("ij,ij->j", V, V)
    nl = np.arange(1, m)
    ok = (nl >= min_leaf) & (m - nl >= min_leaf) & (xs[1:] > xs[:-1]) & (denom > 1e-12 * q)
    if not ok.any():
        return 0.0, -1
    gain = np.zeros(m - 1)
    gain[ok] = a[ok] ** 2 / denom[ok]
    pos = int(np.argmax(gain))
    if not gain[pos] > 0.0:
        return 0.0, -1
    return float(gain[pos]), pos


def tree_predict(X, feature, threshold, left, right, value):
    """Route every row of ``X`` to its leaf and return the leaf values."""
    X = np.asarray(X, dtype=float)
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        r = rows[active]
        nd = node[r]
        go_left = X[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node].astype(float)


def loo_apply(A, R):
    """``out[i] = sum_{j != i} A[i, j] * R[j]``, never reading ``R[i]`` for row i."""
    A = np.asarray(A, dtype=float)
    R = np.asarray(R, dtype=float)
    finite = np.isfinite(R).all(axis=1)
    if finite.all():
        A0 = A.copy()
        np.fill_diagonal(A0, 0.0)
        return A0 @ R
    out = np.empty((A.shape[0], R.shape[1]))
    for i in range(A.shape[0]):
        keep = np.arange(A.shape[0]) != i
        out[i] = A[i, keep] @ R[keep]
    return out
