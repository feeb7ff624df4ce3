"""Kernel dispatch: compiled Cython loops when built, NumPy otherwise.

Set ``SPATVIM_PURE_PYTHON=1`` before import to force the NumPy versions.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("SPATVIM_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def backends():
    """Available implementations keyed by name (used by tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out


def split_scan(rows, xs, g, P, B, min_leaf):
    return _impl.split_scan(
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(xs, dtype=float),
        np.ascontiguousarray(g, dtype=float),
        np.ascontiguousarray(P, dtype=float),
        np.ascontiguousarray(B, dtype=float),
        int(min_leaf),
    )


def tree_predict(X, feature, threshold, left, right, value):
    return _impl.tree_predict(np.asarray(X, dtype=float), feature, threshold, left, right, value)


def loo_apply(A, R):
    R = np.asarray(R, dtype=float)
    squeeze = R.ndim == 1
    R2 = np.ascontiguousarray(R.reshape(R.shape[0], -1))
    out = _impl.loo_apply(np.ascontiguousarray(A, dtype=float), R2)
    return out[:, 0] if squeeze else out
