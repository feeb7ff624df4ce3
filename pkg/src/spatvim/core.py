"""Shared domain types: sites, datasets, link functions and outcome transforms."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .exceptions import ConfigurationError, DomainError, SchemaError

EARTH_RADIUS_KM = 6371.0

METRICS = ("euclidean", "haversine-km")
TRANSFORMS = ("identity", "log", "sqrt")
LINKS = ("identity", "log")

CSV_REQUIRED = ("site_id", "x", "y", "outcome")


# --------------------------------------------------------------------------
# Outcome transforms
# --------------------------------------------------------------------------

def transform_outcome(y, transform="identity"):
    """Apply an outcome transform elementwise.

    Parameters
    ----------
    y : array_like
        Outcome values on the original scale.
    transform : {"identity", "log", "sqrt"}

    Returns
    -------
    numpy.ndarray

    Raises
    ------
    DomainError
        If a value is outside the transform's domain (``y <= 0`` for log,
        ``y < 0`` for sqrt). The message names the first offending index.
    """
    y = np.asarray(y, dtype=float)
    if transform == "identity":
        return y.copy()
    if transform == "log":
        bad = np.flatnonzero(~(y > 0))
        if bad.size:
            raise DomainError(f"log transform requires y > 0; index {bad[0]} has value {y[bad[0]]!r}")
        return np.log(y)
    if transform == "sqrt":
        bad = np.flatnonzero(~(y >= 0))
        if bad.size:
            raise DomainError(f"sqrt transform requires y >= 0; index {bad[0]} has value {y[bad[0]]!r}")
        return np.sqrt(y)
    raise ConfigurationError(f"unknown outcome transform {transform!r}")


def inverse_transform_outcome(z, transform="identity"):
    """Invert :func:`transform_outcome`."""
    z = np.asarray(z, dtype=float)
    if transform == "identity":
        return z.copy()
    if transform == "log":
        return np.exp(z)
    if transform == "sqrt":
        return np.square(z)
    raise ConfigurationError(f"unknown outcome transform {transform!r}")


@dataclass(frozen=True)
class LinkFunction:
    """Link ``g`` between the mean surface and the additive linear predictor."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in LINKS:
            raise ConfigurationError(f"unknown link {self.kind!r}")

    def apply(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "identity":
            return mu.copy()
        bad = np.flatnonzero(~(mu > 0))
        if bad.size:
            raise DomainError(f"log link requires positive values; index {bad[0]} has {mu[bad[0]]!r}")
        return np.log(mu)

    def invert(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return eta.copy()
        return np.exp(eta)


# --------------------------------------------------------------------------
# Sites and distances
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Location:
    id: int
    x: float
    y: float
    metric: str = "euclidean"


def _validate_coords(coords, metric):
    if metric not in METRICS:
        raise ConfigurationError(f"unknown metric {metric!r}")
    if not np.all(np.isfinite(coords)):
        raise ConfigurationError("site coordinates must be finite")
    if metric == "haversine-km":
        lon, lat = coords[:, 0], coords[:, 1]
        if np.any(np.abs(lon) > 180) or np.any(np.abs(lat) > 90):
            raise ConfigurationError("haversine coordinates need x in [-180, 180] and y in [-90, 90]")


class Sites:
    """An ordered set of locations sharing one distance metric.

    Stored as arrays: ``ids`` (n,) and ``coords`` (n, 2). Instances are
    treated as immutable; the arrays are write-protected.
    """

    __slots__ = ("ids", "coords", "metric")

    def __init__(self, coords, ids=None, metric="euclidean"):
        coords = np.array(coords, dtype=float).reshape(-1, 2)
        _validate_coords(coords, metric)
        if ids is None:
            ids = np.arange(coords.shape[0])
        ids = np.array(ids, dtype=np.int64).reshape(-1)
        if ids.shape[0] != coords.shape[0]:
            raise ConfigurationError("ids and coords differ in length")
        if np.unique(ids).size != ids.size:
            raise ConfigurationError("site ids must be unique")
        coords.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "metric", metric)

    def __setattr__(self, name, value):
        raise AttributeError("Sites is immutable")

    def __reduce__(self):
        return (Sites, (np.array(self.coords), np.array(self.ids), self.metric))

    @classmethod
    def from_locations(cls, locations: Sequence[Location]) -> "Sites":
        metrics = {loc.metric for loc in locations}
        if len(metrics) > 1:
            raise ConfigurationError(f"sites mix distance metrics: {sorted(metrics)}")
        metric = metrics.pop() if metrics else "euclidean"
        coords = np.array([[loc.x, loc.y] for loc in locations], dtype=float).reshape(-1, 2)
        return cls(coords, ids=[loc.id for loc in locations], metric=metric)

    def __len__(self):
        return self.coords.shape[0]

    def __getitem__(self, idx):
        return Location(int(self.ids[idx]), float(self.coords[idx, 0]),
                        float(self.coords[idx, 1]), self.metric)

    def subset(self, index) -> "Sites":
        """Sites at ``index``; repeated indices get fresh ids to stay unique."""
        index = np.asarray(index)
        ids = self.ids[index]
        if np.unique(ids).size != ids.size:
            ids = np.arange(ids.size)
        return Sites(self.coords[index], ids=ids, metric=self.metric)

    def __eq__(self, other):
        return (isinstance(other, Sites) and self.metric == other.metric
                and np.array_equal(self.coords, other.coords))

    def __hash__(self):
        return hash((self.metric, self.coords.tobytes()))

    def __repr__(self):
        return f"Sites(n={len(self)}, metric={self.metric!r})"


def as_sites(sites) -> Sites:
    if isinstance(sites, Sites):
        return sites
    sites = list(sites)
    if sites and isinstance(sites[0], Location):
        return Sites.from_locations(sites)
    return Sites(np.asarray(sites, dtype=float))


def _haversine(a, b):
    lon1, lat1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lon2, lat2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def cross_distances(sites_a, sites_b) -> np.ndarray:
    """Distances between every site in ``sites_a`` and every site in ``sites_b``."""
    a, b = as_sites(sites_a), as_sites(sites_b)
    if a.metric != b.metric:
        raise ConfigurationError(f"cannot mix metrics {a.metric!r} and {b.metric!r}")
    if a.metric == "haversine-km":
        return _haversine(a.coords, b.coords)
    diff = a.coords[:, None, :] - b.coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def pairwise_distances(sites) -> np.ndarray:
    """Symmetric distance matrix with an exact zero diagonal.

    Haversine distances are in kilometres (Earth radius 6371 km).
    """
    s = as_sites(sites)
    d = cross_distances(s, s)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Covariates, outcome and sites for one spatial prediction problem.

    ``y`` always holds the outcome on its original (raw) scale; the
    ``transform`` tag records which transform the models work under, and
    :attr:`y_transformed` applies it.
    """

    X: np.ndarray
    y: np.ndarray
    sites: Sites
    names: tuple = ()
    transform: str = "identity"
    _y_t: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.array(self.y, dtype=float).reshape(-1)
        sites = as_sites(self.sites)
        n, p = X.shape
        if n < 3:
            raise ConfigurationError(f"a dataset needs at least 3 sites, got {n}")
        if p < 1:
            raise ConfigurationError("a dataset needs at least one covariate")
        if y.shape[0] != n or len(sites) != n:
            raise ConfigurationError("X, y and sites must have the same number of rows")
        if not np.all(np.isfinite(X)):
            raise ConfigurationError("covariates contain NaN or Inf")
        if not np.all(np.isfinite(y)):
            raise ConfigurationError("outcome contains NaN or Inf")
        if self.transform not in TRANSFORMS:
            raise ConfigurationError(f"unknown outcome transform {self.transform!r}")
        names = tuple(self.names) if len(self.names) else tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ConfigurationError("one name per covariate column is required")
        y_t = transform_outcome(y, self.transform)
        for arr in (X, y, y_t):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_y_t", y_t)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def y_transformed(self) -> np.ndarray:
        return self._y_t

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.X[index], self.y[index], self.sites.subset(index),
                       self.names, self.transform)

    def with_y(self, y) -> "Dataset":
        return Dataset(self.X, y, self.sites, self.names, self.transform)

    def select_columns(self, cols) -> "Dataset":
        cols = list(cols)
        return Dataset(self.X[:, cols], self.y, self.sites,
                       tuple(self.names[c] for c in cols), self.transform)


def read_dataset_csv(path, transform="identity", metric="euclidean", require_outcome=True):
    """Read a dataset CSV (``site_id,x,y,outcome,<covariates...>``).

    With ``require_outcome=False`` empty outcome cells are allowed and the
    function returns the raw pieces ``(X, y, sites, names)`` instead of a
    :class:`Dataset`, for prediction inputs.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in CSV_REQUIRED if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns {missing}")
        rows = [r for r in reader if r]
    idx = {c: header.index(c) for c in CSV_REQUIRED}
    cov_cols = [i for i, h in enumerate(header) if h not in CSV_REQUIRED]
    if not cov_cols:
        raise SchemaError(f"{path}: no covariate columns")

    def num(s):
        s = s.strip()
        return float("nan") if s == "" else float(s)

    try:
        ids = np.array([int(r[idx["site_id"]]) for r in rows], dtype=np.int64)
        coords = np.array([[num(r[idx["x"]]), num(r[idx["y"]])] for r in rows], dtype=float)
        y = np.array([num(r[idx["outcome"]]) for r in rows], dtype=float)
        X = np.array([[num(r[i]) for i in cov_cols] for r in rows], dtype=float)
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: malformed row ({exc})") from None
    names = tuple(header[i] for i in cov_cols)
    sites = Sites(coords, ids=ids, metric=metric)
    if require_outcome:
        return Dataset(X, y, sites, names, transform)
    return X, y, sites, names


def _fmt(v):
    return repr(float(v))


def write_dataset_csv(path, data: Dataset):
    """Write ``data`` with the raw outcome, one row per site."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_REQUIRED) + list(data.names))
        for i in range(data.n):
            w.writerow([int(data.sites.ids[i]), _fmt(data.sites.coords[i, 0]),
                        _fmt(data.sites.coords[i, 1]), _fmt(data.y[i])]
                       + [_fmt(v) for v in data.X[i]])


# --------------------------------------------------------------------------
# Additive spatial model contract
# --------------------------------------------------------------------------

class SpatialComponent(Protocol):
    """One ``f_k + nu_k`` term: a mean function plus a fitted covariance."""

    cov: "object"

    def predict_mean(self, X) -> np.ndarray: ...


class AdditiveSpatialModel(Protocol):
    """What the importance procedure needs from a fitted model.

    ``components`` are combined as ``sum_k weights[k] * (f_k + nu_k)`` on the
    link scale, followed by ``link.invert`` and the outcome back-transform.
    """

    link: LinkFunction
    transform: str
    train_sites: Sites

    @property
    def components(self) -> Sequence[SpatialComponent]: ...

    @property
    def weights(self) -> np.ndarray: ...


def model_target(y_raw, transform: str, link: LinkFunction) -> np.ndarray:
    """Outcome on the scale the additive predictor is fitted on."""
    return link.apply(transform_outcome(y_raw, transform))


def to_outcome_scale(eta, transform: str, link: LinkFunction) -> np.ndarray:
    return inverse_transform_outcome(link.invert(eta), transform)


def check_finite(name: str, values: Iterable[float]):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} must be finite")
    return arr
