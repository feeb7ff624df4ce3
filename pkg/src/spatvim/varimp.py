"""Leave-one-out quantile-contrast variable importance for additive spatial models.

For covariate ``j`` and quantile level ``q``, the column is set to its
empirical ``q``-quantile at every site, each component's mean is
re-evaluated, and at every site ``i`` the component's error field is
re-estimated from the updated residuals at all *other* sites and kriged to
``s_i``. Averaging the resulting linear predictors over sites (and
components, with the model's own weights) gives ``mu_bar[j, l]``.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import Dataset, Sites, model_target, pairwise_distances, to_outcome_scale
from .covariance import fit_ml_or_best, krige, loo_weights
from .exceptions import ConfigurationError, GridShapeError, SpatvimError

logger = logging.getLogger(__name__)

POLICIES = ("full_refit", "weights_only")
FULL_REFIT_MAX_N = 300


class RefitFallbackWarning(UserWarning):
    """A per-site covariance re-fit failed and kriging used the model's parameters."""


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels in ``[0, 1]``."""

    levels: tuple

    def __post_init__(self):
        lv = tuple(float(q) for q in np.atleast_1d(self.levels))
        if not lv:
            raise ConfigurationError("quantile grid is empty")
        if any(not 0 <= q <= 1 for q in lv):
            raise ConfigurationError("quantile levels must lie in [0, 1]")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigurationError("quantile levels must be strictly increasing")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def quartiles(cls):
        return cls((0.25, 0.5, 0.75))

    @classmethod
    def parse(cls, text):
        return cls(tuple(float(t) for t in str(text).split(",") if t.strip()))

    @property
    def m(self):
        return len(self.levels)


def empirical_quantile(x, q):
    """Nearest order statistic: sorted ``x`` at 1-based index ``ceil(q n)`` (1 at ``q = 0``).

    The result is always one of the observed values.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise ConfigurationError("empirical quantile of an empty vector")
    if not 0 <= q <= 1:
        raise ConfigurationError(f"quantile level {q} outside [0, 1]")
    n = x.size
    # round first so that e.g. 0.3 * 10 is not pushed to 4 by representation error
    k = max(1, math.ceil(round(q * n, 9)))
    return float(np.sort(x)[k - 1])


def substitute_quantile(X, j, value):
    """Copy of ``X`` with every entry of column ``j`` set to ``value``."""
    X = np.array(X, dtype=float)
    if not -X.shape[1] <= j < X.shape[1]:
        raise ConfigurationError(f"column {j} out of range for {X.shape[1]} covariates")
    X[:, j] = value
    return X


def _refit_site(cov, r, D, i, fixed):
    n = r.shape[0]
    keep = np.concatenate([np.arange(i), np.arange(i + 1, n)])
    Dk = D[np.ix_(keep, keep)]
    sub = Sites(cov.train_sites.coords[keep], metric=cov.train_sites.metric)
    fit = fit_ml_or_best(r[keep], sub, init=cov.params, fixed=fixed, dist=Dk)
    return float(krige(fit, None, dist=D[i, keep][None, :])[0])


def loo_linear_predictor(component, X, y, sites=None, j=None, value=None, policy="weights_only",
                         A=None, dist=None):
    """Per-site mean and leave-one-out kriging terms for one component.

    Parameters
    ----------
    component : object with ``predict_mean`` and ``cov``
    X : array_like, shape (n, p)
        Covariates at the training sites.
    y : array_like, shape (n,)
        Outcome on the modelling scale. Entry ``i`` is never used for site
        ``i``; it may be NaN.
    sites : Sites, optional
        Must match the component's training sites (used only for checking).
    j, value : int and float, optional
        When given, column ``j`` is first set to ``value`` at every site.
    policy : {"weights_only", "full_refit"}
        Reuse the fitted covariance parameters, or re-estimate them by ML
        on the ``n - 1`` remaining residuals for every site.
    A : numpy.ndarray, optional
        Precomputed leave-one-out weights (:func:`~spatvim.covariance.loo_weights`).
    dist : numpy.ndarray, optional
        Pairwise distances of the training sites (``full_refit`` only).

    Returns
    -------
    zeta, nu : numpy.ndarray
        Mean term and leave-one-out kriging term at every site.
    fallbacks : list of (int, str)
        Sites whose re-fit failed and used the fitted parameters instead.
    """
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown refit policy {policy!r}")
    cov = component.cov
    if sites is not None and sites != cov.train_sites:
        raise ConfigurationError("importance must be evaluated at the model's training sites")
    Xs = np.asarray(X, dtype=float) if j is None else substitute_quantile(X, j, value)
    zeta = component.predict_mean(Xs)
    r = np.asarray(y, dtype=float) - zeta
    n = r.shape[0]
    fallbacks = []
    if cov.params.psill == 0 and cov.fixed_dict.get("psill", None) == 0:
        return zeta, np.zeros(n), fallbacks
    if A is None:
        A = loo_weights(cov)
    if policy == "weights_only":
        return zeta, kernels.loo_apply(A, r), fallbacks
    D = cov.dist if dist is None else dist
    if D is None:
        D = pairwise_distances(cov.train_sites)
    fixed = cov.fixed_dict
    nu = np.empty(n)
    for i in range(n):
        try:
            nu[i] = _refit_site(cov, r, D, i, fixed)
        except (SpatvimError, ValueError, ArithmeticError) as exc:
            fallbacks.append((i, f"{type(exc).__name__}: {exc}"))
            others = np.arange(n) != i
            nu[i] = float(A[i, others] @ r[others])
    return zeta, nu, fallbacks


@dataclass(frozen=True, eq=False)
class ContrastReport:
    """Differences between consecutive quartile levels and their ranking.

    ``d31`` is formed as ``d21 + d32`` so the identity holds exactly in
    floating point.
    """

    names: tuple
    d21: np.ndarray
    d32: np.ndarray
    d31: np.ndarray
    ranking: tuple

    def to_dict(self):
        return {
            "contrasts": [
                {"covariate": nm, "d21": float(a), "d32": float(b), "d31": float(c)}
                for nm, a, b, c in zip(self.names, self.d21, self.d32, self.d31)
            ],
            "ranking": [self.names[r] for r in self.ranking],
        }


@dataclass(frozen=True, eq=False)
class ImportanceTrajectory:
    """``mu_bar[j, l]``: averaged leave-one-out predictions (outcome scale).

    ``mu_bar_linear`` holds the same averages before the inverse link and
    outcome transform. ``warnings`` lists per-site re-fit fallbacks as
    ``(component, covariate, level, site, message)``.
    """

    mu_bar: np.ndarray
    mu_bar_linear: np.ndarray
    quantile_values: np.ndarray
    levels: tuple
    names: tuple
    policy: str
    warnings: tuple = field(default=())

    def contrasts(self) -> ContrastReport:
        if len(self.levels) != 3:
            raise GridShapeError(f"contrasts need a 3-level grid, got {len(self.levels)} levels")
        mu = self.mu_bar
        d21 = mu[:, 1] - mu[:, 0]
        d32 = mu[:, 2] - mu[:, 1]
        d31 = d21 + d32
        # stable sort on -|d31| keeps ties in covariate order
        ranking = tuple(int(k) for k in np.argsort(-np.abs(d31), kind="stable"))
        return ContrastReport(self.names, d21, d32, d31, ranking)

    def rows(self):
        """``(covariate, q_level, quantile_value, mu_bar)`` records in (j, l) order."""
        for j, nm in enumerate(self.names):
            for l, q in enumerate(self.levels):
                yield nm, q, float(self.quantile_values[j, l]), float(self.mu_bar[j, l])


# --------------------------------------------------------------------------
# Work distribution
# --------------------------------------------------------------------------

_STATE = {}


def _init_worker(model, X, y, levels_values, policy):
    _STATE.clear()
    _STATE.update(model=model, X=X, y=y, qv=levels_values, policy=policy, A={})


def _weights_for(k):
    cache = _STATE["A"]
    if k not in cache:
        cache.clear()
        cache[k] = loo_weights(_STATE["model"].components[k].cov)
    return cache[k]


def _run_unit(unit):
    """Linear predictors for component ``k`` and covariate ``j`` at every level."""
    k, j = unit
    comp = _STATE["model"].components[k]
    A = _weights_for(k)
    out = []
    fb = []
    for l, v in enumerate(_STATE["qv"][j]):
        zeta, nu, bad = loo_linear_predictor(comp, _STATE["X"], _STATE["y"], None, j, v,
                                             _STATE["policy"], A=A)
        out.append(zeta + nu)
        fb.extend((k, j, l, i, msg) for i, msg in bad)
    return k, j, np.array(out), fb


def compute_importance(model, data: Dataset, grid: QuantileGrid | None = None, policy=None,
                       workers=1) -> ImportanceTrajectory:
    """Leave-one-out quantile-level importance for every covariate.

    Parameters
    ----------
    model : AdditiveSpatialModel
        Fitted on ``data`` (same sites, same row order).
    data : Dataset
    grid : QuantileGrid, default quartiles
    policy : {"full_refit", "weights_only"}, optional
        Defaults to ``full_refit`` when ``n <= 300`` and ``weights_only``
        otherwise.
    workers : int
        Process count. Results are bit-identical for any value: every work
        unit is computed independently and reduced in a fixed order.

    Returns
    -------
    ImportanceTrajectory
    """
    grid = QuantileGrid.quartiles() if grid is None else grid
    if policy is None:
        policy = "full_refit" if data.n <= FULL_REFIT_MAX_N else "weights_only"
    if policy not in POLICIES:
        raise ConfigurationError(f"unknown refit policy {policy!r}")
    if data.sites != model.train_sites:
        raise ConfigurationError("the model was not fitted at this dataset's sites")
    y = model_target(data.y, model.transform, model.link)
    X = np.asarray(data.X)
    p, m = data.p, grid.m
    qv = np.array([[empirical_quantile(X[:, j], q) for q in grid.levels] for j in range(p)])
    K = len(model.components)
    units = [(k, j) for k in range(K) for j in range(p)]
    eta = np.empty((K, p, m, data.n))
    fallbacks = []
    if workers and workers > 1 and len(units) > 1:
        chunk = max(1, len(units) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(model, X, y, qv, policy)) as ex:
            results = list(ex.map(_run_unit, units, chunksize=chunk))
    else:
        _init_worker(model, X, y, qv, policy)
        try:
            results = [_run_unit(u) for u in units]
        finally:
            _STATE.clear()
    for k, j, block, fb in results:
        eta[k, j] = block
        fallbacks.extend(fb)
    fallbacks.sort(key=lambda t: t[:4])
    if fallbacks:
        warnings.warn(f"{len(fallbacks)} per-site covariance re-fits failed; the fitted "
                      "parameters were used for those sites", RefitFallbackWarning, stacklevel=2)
    w = np.asarray(model.weights, dtype=float)
    total = np.zeros((p, m, data.n))
    for k in range(K):
        total += w[k] * eta[k]
    lin = total.mean(axis=2)
    mu = to_outcome_scale(lin, model.transform, model.link)
    return ImportanceTrajectory(mu, lin, qv, grid.levels, tuple(data.names), policy,
                                tuple(fallbacks))
