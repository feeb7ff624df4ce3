"""Synthetic spatial data with a known sparse nonlinear mean.

Five active covariates (distance to A1 road, population density, NDVI,
mixed urban and residential land use) each head a block of correlated
decoys; the outcome adds an exponential Gaussian field and i.i.d. noise to
a fixed polynomial mean.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate, optimize

from .core import Dataset, Sites, pairwise_distances
from .covariance import CovarianceParams, cholesky_factor, cov_from_distances
from .exceptions import ConfigurationError, DegenerateInputError

ROLES = ("distA1", "popden", "ndvi", "mixedurban", "residential")
SHIFTED = ("popden", "mixedurban")

# term -> coefficient of the mean polynomial
DEFAULT_COEFFICIENTS = (
    ("distA1", -0.5),
    ("popden^2", 0.2),
    ("ndvi", -1.0),
    ("sqrt(mixedurban)", 0.5),
    ("residential", 0.5),
    ("distA1*ndvi", -0.25),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``domain`` is the side of the square the sites are drawn on; ``None``
    means the side at which the field's expected sample variance equals
    ``target_spatial_var`` (see :func:`calibrate_domain`). ``mean_scale``
    multiplies every mean coefficient and is set by
    :func:`calibrate_mean_scale`.
    """

    n: int = 300
    p: int = 30
    decoys: int = 3
    block_corr: float = 0.8
    coefficients: tuple = DEFAULT_COEFFICIENTS
    mean_scale: float = 1.0
    theta_err: CovarianceParams = field(default_factory=lambda: CovarianceParams(0.0, 4.0, 2.5))
    nugget_sd: float = 1.0
    domain: float | None = None
    seed: int = 0
    target_mean_var: float = 2.21
    target_spatial_var: float = 1.07

    def __post_init__(self):
        if isinstance(self.theta_err, dict):
            object.__setattr__(self, "theta_err", CovarianceParams.from_dict(self.theta_err))
        if isinstance(self.coefficients, dict):
            object.__setattr__(self, "coefficients", tuple(self.coefficients.items()))
        object.__setattr__(self, "coefficients", tuple((str(k), float(v)) for k, v in self.coefficients))
        if self.p < len(ROLES):
            raise ConfigurationError(f"p must be at least {len(ROLES)}, got {self.p}")
        if self.n < 3:
            raise ConfigurationError("n must be at least 3")
        if not 0 <= self.block_corr < 1:
            raise ConfigurationError("block_corr must lie in [0, 1)")
        if self.decoys < 0 or self.nugget_sd < 0 or self.mean_scale < 0:
            raise ConfigurationError("decoys, nugget_sd and mean_scale must be nonnegative")
        if self.domain is not None and not self.domain > 0:
            raise ConfigurationError("domain side must be positive")
        known = {k for k, _ in DEFAULT_COEFFICIENTS}
        bad = [k for k, _ in self.coefficients if k not in known]
        if bad:
            raise ConfigurationError(f"unknown mean terms {bad}")

    def layout(self):
        """Column names and the index of each active role."""
        per_block = min(self.decoys, (self.p - len(ROLES)) // len(ROLES))
        names, active = [], {}
        for role in ROLES:
            active[role] = len(names)
            names.append(role)
            names.extend(f"{role}_c{d + 1}" for d in range(per_block))
        width = len(str(max(self.p - len(names), 1)))
        names.extend(f"noise{k + 1:0{width}d}" for k in range(self.p - len(names)))
        return tuple(names), active

    def block_of(self):
        """Block label per column: the role it belongs to, or ``None`` for noise."""
        names, _ = self.layout()
        return tuple(next((r for r in ROLES if nm == r or nm.startswith(r + "_c")), None)
                     for nm in names)

    def resolved_domain(self):
        return calibrate_domain(self) if self.domain is None else float(self.domain)

    def to_dict(self):
        d = asdict(self)
        d["theta_err"] = self.theta_err.to_dict()
        d["coefficients"] = dict(self.coefficients)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _expected_correlation(side, range_):
    """Mean of ``exp(-d / range)`` over two independent uniform points in a square."""
    if side == 0:
        return 1.0
    # the coordinate differences (scaled to the unit square) have density 2(1 - u) on [0, 1]
    val, _ = integrate.dblquad(
        lambda v, u: 4 * (1 - u) * (1 - v) * math.exp(-side * math.hypot(u, v) / range_),
        0, 1, 0, 1, epsabs=1e-12, epsrel=1e-10)
    return val


def expected_spatial_variance(theta: CovarianceParams, side):
    """Expected sample variance (ddof 1) of the field over uniform sites.

    Equals ``psill * (1 - mean pairwise correlation)`` for any ``n``.
    """
    return theta.psill * (1.0 - _expected_correlation(side, theta.range))


def calibrate_domain(spec: SyntheticSpec):
    """Square side at which the field's expected sample variance hits its target."""
    th = spec.theta_err
    if not 0 < spec.target_spatial_var < th.psill:
        raise ConfigurationError("target_spatial_var must lie strictly between 0 and the partial sill")
    f = lambda s: expected_spatial_variance(th, s) - spec.target_spatial_var
    hi = th.range
    while f(hi) < 0:
        hi *= 2
    return optimize.brentq(f, 1e-9, hi, xtol=1e-12)


def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def generate_covariates(spec: SyntheticSpec, rng_sites=None, rng_cov=None):
    """Sites uniform on the square domain and block-correlated covariates.

    Columns are standardized (mean 0, sd 1); population density and mixed
    urban land use (and their decoys) are then shifted so their minimum is 0.

    Returns
    -------
    X : numpy.ndarray, shape (n, p)
    sites : Sites
    """
    if rng_sites is None or rng_cov is None:
        rs, rc, _, _ = _streams(spec.seed)
        rng_sites = rs if rng_sites is None else rng_sites
        rng_cov = rc if rng_cov is None else rng_cov
    n = spec.n
    side = spec.resolved_domain()
    coords = rng_sites.uniform(0.0, side, size=(n, 2))
    names, active = spec.layout()
    blocks = spec.block_of()
    X = np.empty((n, spec.p))
    a, b = math.sqrt(spec.block_corr), math.sqrt(1.0 - spec.block_corr)
    for role in ROLES:
        cols = [c for c, blk in enumerate(blocks) if blk == role]
        common = rng_cov.standard_normal(n)
        X[:, cols] = a * common[:, None] + b * rng_cov.standard_normal((n, len(cols)))
    noise = [c for c, blk in enumerate(blocks) if blk is None]
    X[:, noise] = rng_cov.standard_normal((n, len(noise)))
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    for c, blk in enumerate(blocks):
        if blk in SHIFTED:
            X[:, c] -= X[:, c].min()
    return X, Sites(coords)


def mean_function(X, spec: SyntheticSpec):
    """The mean polynomial evaluated on the active columns (times ``mean_scale``)."""
    X = np.asarray(X, dtype=float)
    _, act = spec.layout()
    d, pop, ndvi = X[:, act["distA1"]], X[:, act["popden"]], X[:, act["ndvi"]]
    mixed, resid = X[:, act["mixedurban"]], X[:, act["residential"]]
    if np.any(mixed < 0):
        raise DegenerateInputError("square root of negative mixed urban land use")
    terms = {
        "distA1": d,
        "popden^2": pop ** 2,
        "ndvi": ndvi,
        "sqrt(mixedurban)": np.sqrt(mixed),
        "residential": resid,
        "distA1*ndvi": d * ndvi,
    }
    m = np.zeros(X.shape[0])
    for term, coef in spec.coefficients:
        m += coef * terms[term]
    return spec.mean_scale * m


def generate_outcome(X, sites, spec: SyntheticSpec, rng_field=None, rng_noise=None):
    """Outcome ``y = mean + spatial + nugget`` and its three components.

    Returns
    -------
    y : numpy.ndarray
    components : dict
        ``"mean"``, ``"spatial"`` and ``"nugget"`` arrays; ``y`` is their sum
        accumulated in that order.
    """
    if rng_field is None or rng_noise is None:
        _, _, rf, rn = _streams(spec.seed)
        rng_field = rf if rng_field is None else rng_field
        rng_noise = rn if rng_noise is None else rng_noise
    n = np.asarray(X).shape[0]
    m = mean_function(X, spec)
    if spec.theta_err.psill > 0:
        L = cholesky_factor(cov_from_distances(pairwise_distances(sites), spec.theta_err, square=True))
        eta = L @ rng_field.standard_normal(n)
    else:
        eta = np.zeros(n)
    eps = spec.nugget_sd * rng_noise.standard_normal(n)
    y = m + eta
    y = y + eps
    return y, {"mean": m, "spatial": eta, "nugget": eps}


def simulate(spec: SyntheticSpec):
    """Generate one dataset.

    Returns
    -------
    data : Dataset
    components : dict
        Outcome components (see :func:`generate_outcome`).
    """
    rs, rc, rf, rn = _streams(spec.seed)
    X, sites = generate_covariates(spec, rs, rc)
    y, comps = generate_outcome(X, sites, spec, rf, rn)
    names, _ = spec.layout()
    return Dataset(X, y, sites, names), comps


def max_abs_corr_with_active(X, spec: SyntheticSpec):
    """Per column, the largest absolute sample correlation with any active column."""
    _, act = spec.layout()
    C = np.corrcoef(np.asarray(X, dtype=float), rowvar=False)
    return np.abs(C[:, list(act.values())]).max(axis=1)


def variance_decomposition(components):
    return {k: float(np.var(v, ddof=1)) for k, v in components.items()}


def calibrate_mean_scale(spec: SyntheticSpec, n_mc=100_000, seed=None):
    """Rescale the mean coefficients so the mean's variance matches its target.

    The covariate shift depends on the sample, so the variance is estimated
    over ``ceil(n_mc / n)`` independent datasets of ``n`` rows each and
    averaged. ``seed`` (default: a stream derived from ``spec.seed``) drives
    the Monte Carlo draws only.

    Raises
    ------
    DegenerateInputError
        The mean has zero variance (for example all coefficients zero).
    """
    if n_mc < 1:
        raise ConfigurationError("n_mc must be positive")
    reps = max(1, math.ceil(n_mc / spec.n))
    base = replace(spec, mean_scale=1.0)
    ss = np.random.SeedSequence([spec.seed, 0x5ca1e] if seed is None else seed)
    v = 0.0
    for child in ss.spawn(reps):
        rs, rc = [np.random.default_rng(s) for s in child.spawn(2)]
        X, _ = generate_covariates(replace(base, domain=1.0), rs, rc)
        v += np.var(mean_function(X, base), ddof=1)
    v /= reps
    if not v > 0:
        raise DegenerateInputError("mean function has zero variance; cannot calibrate")
    return replace(spec, mean_scale=math.sqrt(spec.target_mean_var / v))


def default_spec(**kw):
    """Calibrated generator settings (domain side and mean scale)."""
    spec = SyntheticSpec(**kw)
    if spec.domain is None:
        spec = replace(spec, domain=calibrate_domain(spec))
    return calibrate_mean_scale(spec)
