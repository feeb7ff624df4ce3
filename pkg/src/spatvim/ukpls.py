"""UK-PLS: PLS scores as universal-kriging covariates, fitted by maximum likelihood."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (Dataset, LinkFunction, Sites, as_sites, model_target, pairwise_distances,
                   to_outcome_scale)
from .covariance import (CovarianceParams, FittedCovariance, _nll_from_factor, cholesky_factor,
                         cov_from_distances, default_init, fit_ml_or_best, gls_coefficients,
                         krige)
from .exceptions import SchemaError
from .pls import PlsProjection, fit_pls, project, select_components_cv

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class UkPlsModel:
    """Fitted UK-PLS model (a single additive component).

    The linear predictor at new sites is ``[1, project(X)] @ beta`` plus the
    kriged residual field; predictions on the outcome scale apply
    ``link.invert`` and the inverse outcome transform.
    """

    projection: PlsProjection
    beta: np.ndarray
    cov: FittedCovariance
    link: LinkFunction = LinkFunction("identity")
    transform: str = "identity"
    names: tuple = ()
    n_iter: int = 0

    # --- additive-model contract -------------------------------------
    @property
    def components(self):
        return (self,)

    @property
    def weights(self):
        return np.ones(1)

    @property
    def train_sites(self) -> Sites:
        return self.cov.train_sites

    def predict_mean(self, X):
        T = project(self.projection, X)
        return self.beta[0] + T @ self.beta[1:]

    def predict(self, X_new, sites_new):
        return predict_ukpls(self, X_new, sites_new)

    # --- persistence ---------------------------------------------------
    def to_dict(self):
        s = self.cov.train_sites
        return {
            "format_version": FORMAT_VERSION,
            "model": "ukpls",
            "names": list(self.names),
            "transform": self.transform,
            "link": self.link.kind,
            "projection": self.projection.to_dict(),
            "beta": self.beta.tolist(),
            "theta": self.cov.params.to_dict(),
            "fixed": dict(self.cov.fixed),
            "train": {"site_id": s.ids.tolist(), "x": s.coords[:, 0].tolist(),
                      "y": s.coords[:, 1].tolist(), "metric": s.metric,
                      "residuals": self.cov.train_residuals.tolist()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model") != "ukpls":
            raise SchemaError(f"not a UK-PLS model file (model={d.get('model')!r})")
        if d.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported format_version {d.get('format_version')!r}")
        t = d["train"]
        sites = Sites(np.column_stack([t["x"], t["y"]]), ids=t["site_id"], metric=t["metric"])
        cov = FittedCovariance.build(CovarianceParams.from_dict(d["theta"]), sites,
                                     t["residuals"], fixed=d.get("fixed", {}))
        return cls(PlsProjection.from_dict(d["projection"]), np.array(d["beta"], dtype=float),
                   cov, LinkFunction(d["link"]), d["transform"], tuple(d["names"]))


def _design(T):
    return np.column_stack([np.ones(T.shape[0]), T])


def fit_uk_arrays(X, y, sites, l, init=None, fixed=None, dist=None, max_rounds=50, rtol=1e-8):
    """Joint ML fit of ``y = [1, T] beta + nu`` on the modelling scale.

    Alternates GLS for ``beta`` at fixed covariance parameters with covariance
    ML on the GLS residuals, until the joint NLL improves by less than
    ``rtol`` (relative) or ``max_rounds`` rounds have run. Starts from
    ``init`` or, by default, the heuristic initialization on OLS residuals.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    sites = as_sites(sites)
    D = pairwise_distances(sites) if dist is None else dist
    proj = fit_pls(X, y, l)
    F = _design(project(proj, X))
    beta_ols, *_ = np.linalg.lstsq(F, y, rcond=None)
    fixed = dict(fixed or {})
    theta0 = init if init is not None else default_init(y - F @ beta_ols, D)
    theta0 = theta0.replace(**fixed) if fixed else theta0
    L = cholesky_factor(cov_from_distances(D, theta0, square=True))
    beta = gls_coefficients(F, y, L)
    r = y - F @ beta
    prev = _nll_from_factor(L, r)
    theta = theta0
    cold = init is None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        cov = fit_ml_or_best(r, sites, init=None if cold else theta, fixed=fixed, dist=D)
        cold = False
        theta = cov.params
        beta = gls_coefficients(F, y, cov.factor)
        r = y - F @ beta
        nll = _nll_from_factor(cov.factor, r)
        if prev - nll < rtol * max(1.0, abs(nll)):
            break
        prev = nll
    cov = FittedCovariance.build(theta, sites, r, fixed, D)
    beta.setflags(write=False)
    return UkPlsModel(proj, beta, cov, n_iter=rounds)


def predict_uk_arrays(model: UkPlsModel, X_new, sites_new):
    """Linear predictor (modelling scale): mean term plus kriging term."""
    return model.predict_mean(X_new) + krige(model.cov, sites_new)


def fit_ukpls(data: Dataset, l=None, *, link="identity", l_max=None, folds=5, seed=0,
              fixed=None) -> UkPlsModel:
    """Fit UK-PLS to a dataset.

    Parameters
    ----------
    data : Dataset
    l : int, optional
        PLS component count. When omitted it is chosen by
        :func:`~spatvim.pls.select_components_cv` on ``data`` with
        ``l_max``, ``folds`` and ``seed``.
    link : {"identity", "log"}
    fixed : dict, optional
        Covariance parameters held fixed, e.g. ``{"psill": 0.0}`` for a
        model without spatial smoothing.
    """
    lk = LinkFunction(link) if isinstance(link, str) else link
    y = model_target(data.y, data.transform, lk)
    if l is None:
        l = select_components_cv(data.X, y, data.sites, l_max=l_max, folds=folds, seed=seed,
                                 fixed=fixed)
        logger.info("selected %d PLS components", l)
    fit = fit_uk_arrays(data.X, y, data.sites, l, fixed=fixed)
    return UkPlsModel(fit.projection, fit.beta, fit.cov, lk, data.transform, data.names,
                      fit.n_iter)


def predict_ukpls(model: UkPlsModel, X_new, sites_new, return_parts=False):
    """Predict at new sites on the outcome scale.

    With ``return_parts=True`` also return the mean and kriging terms on the
    modelling (link) scale; their sum is the linear predictor before any
    inverse transform.
    """
    mean = model.predict_mean(X_new)
    kr = krige(model.cov, sites_new)
    pred = to_outcome_scale(mean + kr, model.transform, model.link)
    if return_parts:
        return pred, mean, kr
    return pred
