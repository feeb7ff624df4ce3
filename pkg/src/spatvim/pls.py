"""Partial least squares (single response) for the UK-PLS mean model."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DegenerateInputError

logger = logging.getLogger(__name__)

TIE_TOL = 1e-9


class NoSignalWarning(UserWarning):
    """Cross-validated R^2 of the best component count is not positive."""


@dataclass(frozen=True)
class PlsProjection:
    """Standardization plus the ``p x l`` weight matrix mapping X to PLS scores.

    ``project(X) = ((X - x_center) / x_scale) @ H``.
    """

    H: np.ndarray
    x_center: np.ndarray
    x_scale: np.ndarray

    @property
    def l(self) -> int:
        return self.H.shape[1]

    @property
    def p(self) -> int:
        return self.H.shape[0]

    def to_dict(self):
        return {"H": self.H.tolist(), "x_center": self.x_center.tolist(),
                "x_scale": self.x_scale.tolist(), "l": self.l}

    @classmethod
    def from_dict(cls, d):
        H = np.array(d["H"], dtype=float).reshape(-1, int(d["l"]))
        return cls(H, np.array(d["x_center"], dtype=float), np.array(d["x_scale"], dtype=float))


def fit_pls(X, y, l, names=None) -> PlsProjection:
    """NIPALS PLS1 on standardized covariates with y-deflation.

    Each weight vector is proportional to ``X_a' y_a`` for the current
    deflated covariates ``X_a`` and response ``y_a``, which maximizes the
    covariance between the new score and the response.

    Parameters
    ----------
    X : array_like, shape (n, p)
    y : array_like, shape (n,)
    l : int
        Number of components, ``1 <= l <= min(p, n - 1)``.
    names : sequence of str, optional
        Column labels used in error messages.

    Raises
    ------
    DegenerateInputError
        A covariate has zero variance, or ``y`` has zero covariance with
        every covariate.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    if not 1 <= l <= min(p, n - 1):
        raise ConfigurationError(f"component count {l} outside [1, {min(p, n - 1)}]")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    zero = np.flatnonzero(~(scale > 1e-12 * np.maximum(1.0, np.abs(center))))
    if zero.size:
        col = zero[0] if names is None else names[zero[0]]
        raise DegenerateInputError(f"covariate {col!r} has zero variance")
    Xa = (X - center) / scale
    ya = y - y.mean()
    w0 = Xa.T @ ya
    if not np.linalg.norm(w0) > 1e-12 * max(1.0, np.linalg.norm(Xa) * np.linalg.norm(ya)):
        raise DegenerateInputError("response has zero covariance with every covariate")
    W = np.empty((p, l))
    Pl = np.empty((p, l))
    for a in range(l):
        w = Xa.T @ ya
        nw = np.linalg.norm(w)
        if not nw > 1e-10 * np.linalg.norm(w0):
            # response fully explained: continue along the dominant remaining X direction
            _, _, vt = np.linalg.svd(Xa, full_matrices=False)
            w = vt[0]
            nw = 1.0
        w = w / nw
        t = Xa @ w
        tt = t @ t
        if not tt > 0:
            raise DegenerateInputError("covariates are rank deficient for the requested components")
        load = Xa.T @ t / tt
        Xa = Xa - np.outer(t, load)
        ya = ya - (ya @ t / tt) * t
        W[:, a] = w
        Pl[:, a] = load
    H = W @ np.linalg.inv(Pl.T @ W)
    for arr in (H, center, scale):
        arr.setflags(write=False)
    return PlsProjection(H, center, scale)


def project(proj: PlsProjection, X_new) -> np.ndarray:
    """Scores of new covariate rows."""
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    if X_new.shape[1] != proj.p:
        raise ConfigurationError(f"expected {proj.p} covariate columns, got {X_new.shape[1]}")
    return ((X_new - proj.x_center) / proj.x_scale) @ proj.H


def fold_ids(n, folds, seed):
    """Near-equal random fold labels ``0..folds-1``."""
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    ids[perm] = np.arange(n) % folds
    return ids


def select_components_cv(X, y, sites, l_max=None, folds=5, seed=0, fixed=None,
                         return_scores=False):
    """Choose the PLS component count by cross-validating the full UK-PLS fit.

    Every candidate ``l`` in ``1..l_max`` is scored by the mean out-of-fold
    R^2 of UK-PLS (PLS plus universal kriging) fitted on the remaining folds.
    Ties, meaning scores within ``TIE_TOL`` (relative) of the best, go to the
    smaller ``l``. ``y`` is taken on the modelling scale.

    A :class:`NoSignalWarning` is issued when the best score is not positive.
    """
    from .ukpls import fit_uk_arrays, predict_uk_arrays

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = X.shape
    cap = min(p, n - 1)
    l_max = min(cap, 10) if l_max is None else int(l_max)
    if not 1 <= l_max <= cap:
        raise ConfigurationError(f"l_max must lie in [1, {cap}]")
    if folds < 2:
        raise ConfigurationError("need at least two folds")
    if l_max == 1:
        return (1, np.array([np.nan])) if return_scores else 1
    ids = fold_ids(n, folds, seed)
    scores = np.zeros((folds, l_max))
    for f in range(folds):
        tr, te = np.flatnonzero(ids != f), np.flatnonzero(ids == f)
        s_tr, s_te = sites.subset(tr), sites.subset(te)
        yt = y[te]
        ss = float(((yt - yt.mean()) ** 2).sum())
        init = None
        for l in range(1, min(l_max, tr.size - 1) + 1):
            model = fit_uk_arrays(X[tr], y[tr], s_tr, l, init=init, fixed=fixed)
            init = model.cov.params
            pred = predict_uk_arrays(model, X[te], s_te)
            scores[f, l - 1] = 1.0 - float(((yt - pred) ** 2).sum()) / ss if ss > 0 else 0.0
    mean = scores.mean(axis=0)
    # scores within rounding noise of the maximum count as ties
    top = mean.max()
    best = int(np.flatnonzero(mean >= top - TIE_TOL * max(1.0, abs(top)))[0]) + 1
    if not mean[best - 1] > 0:
        warnings.warn(f"best cross-validated R^2 is {mean[best - 1]:.3g} (l={best}); "
                      "no predictive signal found", NoSignalWarning, stacklevel=2)
    logger.debug("component CV scores: %s", mean)
    return (best, mean) if return_scores else best
