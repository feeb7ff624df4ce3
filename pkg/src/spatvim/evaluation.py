"""Cross-validation, R^2 and covariate screening."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .exceptions import ConfigurationError, DegenerateInputError, SpatvimError
from .pls import fold_ids

logger = logging.getLogger(__name__)

MODEL_KINDS = ("ukpls", "spatrf", "rf")


# --------------------------------------------------------------------------
# Screening
# --------------------------------------------------------------------------

def screen_covariates(X, names=None, landuse=None, mode_frac=0.2, outlier_mult=5.0,
                      outlier_frac=0.02, landuse_max=0.10):
    """Drop covariates with too little variation, too many outliers, or negligible land use.

    Rules, applied per column in this order (the first one that fires is logged):

    * ``low_variability``: fewer than ``mode_frac`` of the values differ from the
      most common value;
    * ``outliers``: more than ``outlier_frac`` of the values satisfy
      ``|x - median| > outlier_mult * IQR``;
    * ``landuse_max``: the column is flagged as a land-use proportion and its
      maximum is below ``landuse_max``.

    Parameters
    ----------
    X : array_like, shape (n, p)
    names : sequence of str, optional
    landuse : sequence of bool, optional
        Per-column flag marking land-use proportions.

    Returns
    -------
    retained : list of int
    log : list of dict
        One entry per excluded column: ``index``, ``name``, ``rule``, ``value``.

    Raises
    ------
    DegenerateInputError
        Every column was excluded.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigurationError("X must be a matrix")
    n, p = X.shape
    if n < 10:
        raise ConfigurationError(f"screening needs at least 10 rows, got {n}")
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(p))
    landuse = tuple(landuse) if landuse is not None else (False,) * p
    if len(names) != p or len(landuse) != p:
        raise ConfigurationError("names and landuse flags need one entry per column")
    retained, log = [], []
    for j in range(p):
        x = X[:, j]
        _, counts = np.unique(x, return_counts=True)
        differ = 1.0 - counts.max() / n
        if differ < mode_frac:
            log.append({"index": j, "name": names[j], "rule": "low_variability", "value": differ})
            continue
        q1, med, q3 = np.percentile(x, [25, 50, 75])
        out = float(np.mean(np.abs(x - med) > outlier_mult * (q3 - q1)))
        if out > outlier_frac:
            log.append({"index": j, "name": names[j], "rule": "outliers", "value": out})
            continue
        if landuse[j] and x.max() < landuse_max:
            log.append({"index": j, "name": names[j], "rule": "landuse_max", "value": float(x.max())})
            continue
        retained.append(j)
    for entry in log:
        logger.info("excluded covariate %s (%s=%.4g)", entry["name"], entry["rule"], entry["value"])
    if not retained:
        raise DegenerateInputError("every covariate was excluded by screening")
    return retained, log


# --------------------------------------------------------------------------
# R^2 and cross-validation
# --------------------------------------------------------------------------

def r_squared(y_true, y_pred, y_mean=None):
    """``1 - sum (y - yhat)^2 / sum (y - ybar)^2``.

    ``y_mean`` overrides ``ybar`` (cross-validation passes the full-data mean).
    """
    y = np.asarray(y_true, dtype=float).reshape(-1)
    yh = np.asarray(y_pred, dtype=float).reshape(-1)
    if y.shape != yh.shape:
        raise ConfigurationError("y_true and y_pred differ in length")
    if y.size < 2:
        raise ConfigurationError("R^2 needs at least two observations")
    ybar = y.mean() if y_mean is None else float(y_mean)
    ss = float(((y - ybar) ** 2).sum())
    if not ss > 0:
        raise DegenerateInputError("R^2 is undefined for a constant outcome")
    return 1.0 - float(((y - yh) ** 2).sum()) / ss


class CvFoldError(SpatvimError):
    """A model fit or prediction failed inside one cross-validation fold."""

    def __init__(self, fold, exc):
        super().__init__(f"fold {fold}: {type(exc).__name__}: {exc}")
        self.fold = fold


@dataclass(frozen=True)
class ModelSpec:
    """What to fit inside each fold.

    ``kind`` is ``"ukpls"``, ``"spatrf"`` or ``"rf"`` (the forest with no
    covariance refits, i.e. a plain random forest). ``options`` are passed to
    :func:`~spatvim.ukpls.fit_ukpls` or
    :class:`~spatvim.spatrf.SpatRfHyper`; ``K`` and ``link`` are common.
    """

    kind: str = "ukpls"
    K: int = 200
    link: str = "identity"
    options: tuple = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if isinstance(self.options, dict):
            object.__setattr__(self, "options", tuple(sorted(self.options.items())))

    def fit(self, data: Dataset, seed=0, workers=1):
        opts = dict(self.options)
        if self.kind == "ukpls":
            from .ukpls import fit_ukpls

            return fit_ukpls(data, link=self.link, seed=seed, **opts)
        from .spatrf import SpatRfHyper, fit_spatrf

        if self.kind == "rf":
            opts["rounds"] = 0
        return fit_spatrf(data, K=self.K, hyper=SpatRfHyper(**opts), seed=seed, link=self.link,
                          workers=workers)

    @staticmethod
    def predict(model, X, sites):
        return model.predict(X, sites)


@dataclass(frozen=True, eq=False)
class CvResult:
    """Out-of-fold predictions on the original outcome scale."""

    folds: np.ndarray
    site_ids: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    r2: float
    per_fold_r2: tuple
    extras: dict = field(default_factory=dict)

    @property
    def errors(self):
        """``y_hat - y`` per site."""
        return self.y_hat - self.y

    def to_dict(self):
        return {"r2": self.r2, "per_fold_r2": list(self.per_fold_r2)}


def _fold_job(args):
    spec, data, f, tr, te, seed = args
    try:
        model = spec.fit(data.subset(tr), seed=seed)
        return f, ModelSpec.predict(model, data.X[te], data.sites.subset(te))
    except SpatvimError as exc:
        raise CvFoldError(f, exc) from exc
    except (ValueError, ArithmeticError) as exc:
        raise CvFoldError(f, exc) from exc


def kfold_cv(spec: ModelSpec, data: Dataset, k=10, seed=0, workers=1) -> CvResult:
    """``k``-fold cross-validation with a full re-fit in every fold.

    Folds are a seeded random near-equal partition. Fold ``f`` fits with
    seed ``seed * 1000 + f`` so forest draws differ between folds but not
    between runs. All choices made during fitting (PLS component count,
    covariance parameters) use the training folds only. R^2 is computed on
    the original outcome scale with the full-data mean in the denominator,
    both overall and per fold.
    """
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if data.n < 2 * k:
        raise ConfigurationError(f"need n >= 2k, got n={data.n}, k={k}")
    folds = fold_ids(data.n, k, seed)
    jobs = []
    for f in range(k):
        tr, te = np.flatnonzero(folds != f), np.flatnonzero(folds == f)
        jobs.append((spec, data, f, tr, te, seed * 1000 + f))
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    y_hat = np.empty(data.n)
    for f, pred in results:
        y_hat[folds == f] = pred
    y = np.asarray(data.y)
    ybar = float(y.mean())
    r2 = r_squared(y, y_hat, ybar)
    per = []
    for f in range(k):
        te = folds == f
        ss = float(((y[te] - ybar) ** 2).sum())
        per.append(1.0 - float(((y[te] - y_hat[te]) ** 2).sum()) / ss if ss > 0 else float("nan"))
    return CvResult(folds, np.array(data.sites.ids), y.copy(), y_hat, r2, tuple(per))
