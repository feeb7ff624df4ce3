"""Exponential covariance, maximum-likelihood fitting and kriging.

The error component of every model is a zero-mean Gaussian field with
covariance ``psill * exp(-d / range)`` plus ``nugget`` on the diagonal of
the training block.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .core import Sites, as_sites, cross_distances, pairwise_distances
from .exceptions import ConvergenceError, DegenerateInputError, NumericalRankError

logger = logging.getLogger(__name__)

PARAM_NAMES = ("nugget", "psill", "range")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CovarianceParams:
    """Nugget, partial sill and range of the exponential covariance."""

    nugget: float
    psill: float
    range: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (np.isfinite(self.nugget) and np.isfinite(self.psill)):
            raise ValueError("covariance variances must be finite")
        if self.nugget < 0 or self.psill < 0:
            raise ValueError("nugget and partial sill must be nonnegative")
        if not self.nugget + self.psill > 0:
            raise ValueError("nugget + partial sill must be positive")
        if not (np.isfinite(self.range) and self.range > 0):
            raise ValueError("range must be finite and positive")

    def to_dict(self):
        return {"nugget": self.nugget, "psill": self.psill, "range": self.range}

    @classmethod
    def from_dict(cls, d):
        return cls(d["nugget"], d["psill"], d["range"])

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return CovarianceParams(**d)


def cov_from_distances(D, params: CovarianceParams, square=False):
    """Covariance for a distance matrix; ``square`` adds the nugget on the diagonal."""
    D = np.asarray(D, dtype=float)
    if params.psill > 0:
        S = params.psill * np.exp(-D / params.range)
    else:
        S = np.zeros_like(D)
    if square:
        S[np.diag_indices_from(S)] += params.nugget
    return S


def cov_matrix(sites_a, sites_b, params: CovarianceParams):
    """Covariance between two site sets.

    Pass ``sites_b=None`` (or the very same object as ``sites_a``) for the
    square training block, which carries the nugget on its diagonal. Any
    other pair is treated as a cross block: the nugget is measurement noise
    and does not correlate distinct observations, even at equal coordinates.
    """
    if sites_b is None or sites_b is sites_a:
        return cov_from_distances(pairwise_distances(sites_a), params, square=True)
    return cov_from_distances(cross_distances(sites_a, sites_b), params)


def cholesky_factor(S):
    """Lower Cholesky factor, retrying once with a tiny diagonal jitter.

    Raises
    ------
    NumericalRankError
        If the matrix is not positive definite even after jitter.
    """
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    n = S.shape[0]
    jitter = 1e-10 * max(np.trace(S) / max(n, 1), np.finfo(float).tiny)
    try:
        return np.linalg.cholesky(S + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        raise NumericalRankError(
            "covariance matrix is not positive definite (duplicate sites with zero nugget?)"
        ) from None


def _check_duplicates(D, params):
    """Coincident sites make the covariance singular unless there is a nugget."""
    if params.nugget <= 1e-12 * params.psill and D.shape[0] > 1:
        off = D + np.eye(D.shape[0])
        if np.any(off == 0):
            raise NumericalRankError("duplicate sites need a positive nugget")


def factor_for(D, params):
    """Cholesky factor of the square covariance for distance matrix ``D``."""
    _check_duplicates(D, params)
    return cholesky_factor(cov_from_distances(D, params, square=True))


def _nll_from_factor(L, r):
    z = solve_triangular(L, r, lower=True, check_finite=False)
    return 0.5 * r.shape[0] * LOG_2PI + np.log(np.diag(L)).sum() + 0.5 * float(z @ z)


def neg_log_likelihood(residuals, sites, params: CovarianceParams, dist=None):
    """Gaussian negative log-likelihood of mean-zero residuals.

    ``(n/2) log 2pi + (1/2) log|S| + (1/2) r' S^{-1} r`` evaluated through the
    Cholesky factor of ``S``. ``dist`` may carry precomputed pairwise
    distances for ``sites``.
    """
    r = np.asarray(residuals, dtype=float)
    D = pairwise_distances(sites) if dist is None else dist
    return _nll_from_factor(factor_for(D, params), r)


@dataclass(frozen=True, eq=False)
class FittedCovariance:
    """A covariance model conditioned on training residuals.

    Attributes
    ----------
    params : CovarianceParams
    train_sites : Sites
    train_residuals : numpy.ndarray
    factor : numpy.ndarray
        Lower Cholesky factor of the training covariance.
    alpha : numpy.ndarray
        ``S^{-1} r``, reused by every kriging call.
    nll : float
        Negative log-likelihood at ``params``.
    fixed : tuple
        ``(name, value)`` pairs held fixed when the model was fitted; refits
        honour the same constraints.
    """

    params: CovarianceParams
    train_sites: Sites
    train_residuals: np.ndarray
    factor: np.ndarray
    alpha: np.ndarray
    nll: float
    fixed: tuple = ()
    dist: np.ndarray = field(default=None, repr=False)

    @classmethod
    def build(cls, params, sites, residuals, fixed=(), dist=None):
        sites = as_sites(sites)
        r = np.array(residuals, dtype=float).reshape(-1)
        D = pairwise_distances(sites) if dist is None else dist
        L = factor_for(D, params)
        alpha = cho_solve((L, True), r, check_finite=False)
        nll = _nll_from_factor(L, r)
        for a in (r, L, alpha):
            a.setflags(write=False)
        return cls(params, sites, r, L, alpha, nll, tuple(sorted(dict(fixed).items())), D)

    @property
    def fixed_dict(self):
        return dict(self.fixed)

    def covariance(self):
        return self.factor @ self.factor.T

    def precision(self):
        return cho_solve((self.factor, True), np.eye(self.factor.shape[0]), check_finite=False)


def _bounds(v, dmax):
    lo = {"nugget": 1e-8 * v, "psill": 1e-8 * v, "range": 1e-3 * dmax}
    hi = {"nugget": 1e3 * v, "psill": 1e3 * v, "range": 10.0 * dmax}
    return lo, hi


def default_init(residuals, dist):
    """``nugget = psill = var(r)/2`` and ``range = dmax/4``."""
    r = np.asarray(residuals, dtype=float)
    v = float(r.var())
    dmax = float(dist.max()) if dist.size else 1.0
    return CovarianceParams(v / 2, v / 2, (dmax if dmax > 0 else 1.0) / 4)


def fit_ml(residuals, sites, init: CovarianceParams | None = None, fixed=None, dist=None,
           max_iter=500, rtol=1e-8):
    """Maximum-likelihood covariance parameters for mean-zero residuals.

    Nelder-Mead on the log parameters, bounded to
    ``[1e-8, 1e3] * var(r)`` for both variances and ``[1e-3, 10] * dmax`` for
    the range. Iteration stops when the simplex's NLL spread falls below
    ``rtol`` relative to the starting NLL, or after ``max_iter`` iterations.

    Parameters
    ----------
    residuals : array_like, shape (n,)
    sites : Sites or sequence of Location
    init : CovarianceParams, optional
        Starting point (clipped into the bounds). Defaults to
        :func:`default_init`.
    fixed : dict, optional
        Parameters held at a given value, e.g. ``{"psill": 0.0}``.
    dist : numpy.ndarray, optional
        Precomputed pairwise distances for ``sites``.

    Returns
    -------
    FittedCovariance

    Raises
    ------
    DegenerateInputError
        Fewer than three residuals, or all residuals identical.
    ConvergenceError
        Iteration budget exhausted; ``err.best`` holds the best fit found.
    """
    r = np.asarray(residuals, dtype=float).reshape(-1)
    sites = as_sites(sites)
    n = r.shape[0]
    if n < 3:
        raise DegenerateInputError(f"covariance fitting needs n >= 3, got {n}")
    if not np.all(np.isfinite(r)):
        raise DegenerateInputError("residuals contain NaN or Inf")
    v = float(r.var())
    if not v > 1e-300 or np.ptp(r) == 0:
        raise DegenerateInputError("all residuals are identical")
    D = pairwise_distances(sites) if dist is None else dist
    dmax = float(D.max()) or 1.0
    fixed = dict(fixed or {})
    lo, hi = _bounds(v, dmax)
    free = [p for p in PARAM_NAMES if p not in fixed]
    cold = init is None
    start = default_init(r, D) if cold else init
    start_d = start.to_dict()
    start_d.update(fixed)
    x0 = np.array([math.log(min(max(start_d[p], lo[p]), hi[p])) for p in free])
    start_d.update({p: math.exp(x) for p, x in zip(free, x0)})

    def params_of(x):
        d = dict(fixed)
        d.update({p: math.exp(xi) for p, xi in zip(free, x)})
        return CovarianceParams(**d)

    def objective(x):
        try:
            L = factor_for(D, params_of(x))
        except (NumericalRankError, ValueError):
            return 1e300
        return _nll_from_factor(L, r)

    if not free:
        return FittedCovariance.build(CovarianceParams(**fixed), sites, r, fixed, D)

    f0 = objective(x0)
    if not np.isfinite(f0) or f0 >= 1e300:
        raise DegenerateInputError("starting covariance parameters are not usable")
    step = 0.7 if cold else 0.2
    simplex = [x0]
    log_lo = np.array([math.log(lo[p]) for p in free])
    log_hi = np.array([math.log(hi[p]) for p in free])
    for i in range(len(free)):
        x = x0.copy()
        x[i] = x[i] + step if x[i] + step <= log_hi[i] else x[i] - step
        simplex.append(x)
    res = minimize(
        objective, x0, method="Nelder-Mead", bounds=list(zip(log_lo, log_hi)),
        options={"initial_simplex": np.array(simplex), "fatol": rtol * max(1.0, abs(f0)),
                 "xatol": 1e10, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    x_best = res.x if res.fun <= f0 else x0
    fitted = FittedCovariance.build(params_of(x_best), sites, r, fixed, D)
    if not res.success and res.nit >= max_iter:
        raise ConvergenceError(f"covariance ML did not converge in {max_iter} iterations", best=fitted)
    return fitted


def fit_ml_or_best(residuals, sites, **kw):
    """:func:`fit_ml`, keeping the best-so-far fit when the budget runs out."""
    try:
        return fit_ml(residuals, sites, **kw)
    except ConvergenceError as err:
        logger.warning("%s; keeping best-so-far parameters", err)
        return err.best


def krige(fitted: FittedCovariance, test_sites, dist=None):
    """Conditional expectation of the field at ``test_sites``.

    ``S_{tst,trn} S_{trn,trn}^{-1} r`` with the nugget excluded from the
    cross block.
    """
    if fitted.params.psill == 0:
        return np.zeros(len(as_sites(test_sites)) if dist is None else dist.shape[0])
    D = cross_distances(test_sites, fitted.train_sites) if dist is None else dist
    return cov_from_distances(D, fitted.params) @ fitted.alpha


def loo_weights(fitted: FittedCovariance):
    """Leave-one-out kriging weights at fixed parameters.

    Row ``i`` holds ``S_{i,-i} S_{-i,-i}^{-1}`` scattered into length ``n``
    with a zero at ``i``; by the block-inverse identity this equals
    ``-P[i, j] / P[i, i]`` with ``P = S^{-1}``.
    """
    P = fitted.precision()
    A = -P / np.diag(P)[:, None]
    np.fill_diagonal(A, 0.0)
    return A


def gls_coefficients(F, y, factor):
    """Generalized least squares ``(F'S^-1F)^-1 F'S^-1 y`` via whitening by ``factor``."""
    Fw = solve_triangular(factor, F, lower=True, check_finite=False)
    yw = solve_triangular(factor, y, lower=True, check_finite=False)
    beta, *_ = np.linalg.lstsq(Fw, yw, rcond=None)
    return beta
