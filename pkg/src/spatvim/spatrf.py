"""Spatially adjusted random forest (pseudo-likelihood variant).

Each tree alternates between growing a regression tree under a generalized
least squares objective for a fixed exponential covariance, and refitting
that covariance by maximum likelihood on the tree's residuals. Forest
predictions average, over trees, the tree mean plus the tree's kriged
residual field.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels
from .core import (Dataset, LinkFunction, Sites, as_sites, cross_distances, model_target,
                   pairwise_distances, to_outcome_scale)
from .covariance import (CovarianceParams, FittedCovariance, _nll_from_factor, cholesky_factor,
                         cov_from_distances, fit_ml_or_best, krige)
from .exceptions import ConfigurationError, NumericalRankError, SchemaError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class SpatRfHyper:
    """Forest hyperparameters.

    ``mtry=None`` means ``ceil(p / 3)``. ``rounds`` counts covariance refits
    per tree; ``rounds=0`` leaves every tree under a pure-nugget covariance,
    which is an ordinary (non-spatial) random forest. ``fixed`` holds
    covariance parameters pinned during every refit.
    """

    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int = 12
    rounds: int = 2
    bootstrap: bool = True
    fixed: tuple = ()

    def __post_init__(self):
        if isinstance(self.fixed, dict):
            object.__setattr__(self, "fixed", tuple(sorted(self.fixed.items())))
        if self.min_leaf < 1 or self.max_depth < 0 or self.rounds < 0:
            raise ConfigurationError("min_leaf >= 1, max_depth >= 0 and rounds >= 0 are required")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigurationError("mtry must be positive")

    def resolved_mtry(self, p):
        return p if self.mtry is None and p < 3 else min(p, self.mtry or math.ceil(p / 3))

    def to_dict(self):
        d = asdict(self)
        d["fixed"] = dict(self.fixed)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["fixed"] = tuple(sorted(d.get("fixed", {}).items()))
        return cls(**d)


# --------------------------------------------------------------------------
# GLS tree growth
# --------------------------------------------------------------------------

class _LeafDesign:
    """GLS fit of leaf means for the current partition of the sample.

    Keeps ``g = P e`` (precision times GLS residuals) and ``B`` with
    ``|B c|^2 = c' P Z (Z'PZ)^{-1} Z' P c``, the quantities a split scan needs.
    """

    def __init__(self, y, P):
        self.y = y
        self.P = P

    def refresh(self, leaf_rows):
        P, y = self.P, self.y
        PZ = np.column_stack([P[:, rows].sum(axis=1) for rows in leaf_rows])
        G = np.array([[PZ[ra, b].sum() for b in range(len(leaf_rows))] for ra in leaf_rows])
        G = 0.5 * (G + G.T)
        try:
            Lg = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise NumericalRankError("leaf design is rank deficient") from None
        gamma = cho_solve((Lg, True), PZ.T @ y, check_finite=False)
        e = y.copy()
        for rows, gm in zip(leaf_rows, gamma):
            e[rows] -= gm
        self.gamma = gamma
        self.e = e
        self.g = P @ e
        self.B = np.ascontiguousarray(solve_triangular(Lg, PZ.T, lower=True, check_finite=False))


@dataclass
class _Nodes:
    feature: list = field(default_factory=lambda: [-1])
    threshold: list = field(default_factory=lambda: [np.nan])
    left: list = field(default_factory=lambda: [-1])
    right: list = field(default_factory=lambda: [-1])
    depth: list = field(default_factory=lambda: [0])

    def add(self, depth):
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.depth.append(depth)
        return len(self.feature) - 1


def grow_gls_tree(X, y, P, min_leaf=5, max_depth=12, mtry=None, rng=None):
    """Greedy breadth-first tree growth under the GLS objective ``(y-Zg)'P(y-Zg)``.

    A node is split at the covariate/threshold giving the largest drop in
    the GLS residual sum of squares of the whole tree (leaf values
    re-estimated jointly). With ``P`` a multiple of the identity this is
    ordinary CART with mean-valued leaves.

    Returns
    -------
    dict
        Node arrays ``feature`` (-1 for leaves), ``threshold``, ``left``,
        ``right``, ``value`` indexed by node id (root 0).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    P = np.ascontiguousarray(P, dtype=float)
    N, p = X.shape
    mtry = p if mtry is None else min(mtry, p)
    rng = np.random.default_rng() if rng is None else rng
    nodes = _Nodes()
    leaves = {0: np.arange(N)}
    design = _LeafDesign(y, P)
    design.refresh(list(leaves.values()))
    tol = 1e-10 * max(float(design.e @ design.g), 0.0)
    queue = deque([0])
    while queue:
        node = queue.popleft()
        rows = leaves[node]
        if nodes.depth[node] >= max_depth or rows.size < 2 * min_leaf:
            continue
        feats = np.arange(p) if mtry >= p else np.sort(rng.choice(p, mtry, replace=False))
        best_gain, best = tol, None
        for f in feats:
            order = rows[np.argsort(X[rows, f], kind="stable")]
            xs = X[order, f]
            gain, pos = kernels.split_scan(order, xs, design.g, P, design.B, min_leaf)
            # near-equal gains (e.g. two features inducing the same partition)
            # resolve to the lower feature index regardless of rounding
            if pos >= 0 and gain > best_gain * (1 + TIE_RTOL):
                best_gain, best = gain, (f, xs[pos], xs[pos + 1])
        if best is None:
            continue
        f, lo, hi = best
        thr = 0.5 * (lo + hi)
        if not lo <= thr < hi:
            thr = lo
        go_left = X[rows, f] <= thr
        lc, rc = nodes.add(nodes.depth[node] + 1), nodes.add(nodes.depth[node] + 1)
        trial = dict(leaves)
        del trial[node]
        trial[lc], trial[rc] = rows[go_left], rows[~go_left]
        try:
            design.refresh(list(trial.values()))
        except NumericalRankError:
            # keep the node as a leaf; the orphan child slots stay unreachable
            nodes.feature.pop(), nodes.feature.pop()
            for lst in (nodes.threshold, nodes.left, nodes.right, nodes.depth):
                lst.pop(), lst.pop()
            design.refresh(list(leaves.values()))
            continue
        leaves = trial
        nodes.feature[node], nodes.threshold[node] = int(f), float(thr)
        nodes.left[node], nodes.right[node] = lc, rc
        queue.extend([lc, rc])
    value = np.zeros(len(nodes.feature))
    for (nid, _), gm in zip(leaves.items(), design.gamma):
        value[nid] = gm
    return {
        "feature": np.array(nodes.feature, dtype=np.int64),
        "threshold": np.array(nodes.threshold, dtype=float),
        "left": np.array(nodes.left, dtype=np.int64),
        "right": np.array(nodes.right, dtype=np.int64),
        "value": value,
    }


def _leaf_index(arrays, X):
    """Leaf node id reached by each row."""
    ids = np.arange(arrays["feature"].size, dtype=float)
    return kernels.tree_predict(X, arrays["feature"], arrays["threshold"], arrays["left"],
                                arrays["right"], ids).astype(np.int64)


def refit_leaf_values(arrays, X, y, P):
    """GLS leaf values for a fixed tree structure under precision ``P``."""
    leaf = _leaf_index(arrays, X)
    uniq = np.unique(leaf)
    design = _LeafDesign(np.asarray(y, dtype=float), P)
    design.refresh([np.flatnonzero(leaf == u) for u in uniq])
    out = dict(arrays)
    out["value"] = arrays["value"].copy()
    out["value"][uniq] = design.gamma
    return out


# --------------------------------------------------------------------------
# Trees and forests
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpatialTree:
    """One forest member: a regression tree plus its fitted covariance.

    ``cov`` conditions on the tree's residuals at all training sites; the
    covariance parameters were estimated on the bootstrap sample.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cov: FittedCovariance
    bootstrap: np.ndarray
    objective_trace: tuple = ()

    @property
    def theta(self) -> CovarianceParams:
        return self.cov.params

    @property
    def arrays(self):
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}

    @property
    def n_leaves(self):
        return int(np.count_nonzero(self.reachable() & (self.feature < 0)))

    def reachable(self):
        seen = np.zeros(self.feature.size, dtype=bool)
        stack = [0]
        while stack:
            nd = stack.pop()
            seen[nd] = True
            if self.feature[nd] >= 0:
                stack.extend([self.left[nd], self.right[nd]])
        return seen

    def depth(self):
        best, stack = 0, [(0, 0)]
        while stack:
            nd, d = stack.pop()
            best = max(best, d)
            if self.feature[nd] >= 0:
                stack.extend([(self.left[nd], d + 1), (self.right[nd], d + 1)])
        return best

    def predict_mean(self, X):
        return kernels.tree_predict(X, self.feature, self.threshold, self.left, self.right,
                                    self.value)

    def preorder(self):
        """Nodes as a preorder list of ``{"feature", "threshold"}`` / ``{"value"}`` dicts."""
        out, stack = [], [0]
        while stack:
            nd = stack.pop()
            if self.feature[nd] >= 0:
                out.append({"feature": int(self.feature[nd]), "threshold": float(self.threshold[nd])})
                stack.extend([self.right[nd], self.left[nd]])
            else:
                out.append({"value": float(self.value[nd])})
        return out

    @staticmethod
    def arrays_from_preorder(nodes):
        feature, threshold, left, right, value = [], [], [], [], []
        pos = 0

        def build():
            nonlocal pos
            if pos >= len(nodes):
                raise SchemaError("truncated preorder node list")
            rec = nodes[pos]
            pos += 1
            me = len(feature)
            feature.append(-1), threshold.append(np.nan), left.append(-1), right.append(-1)
            value.append(0.0)
            if "value" in rec:
                value[me] = float(rec["value"])
            else:
                feature[me], threshold[me] = int(rec["feature"]), float(rec["threshold"])
                left[me] = build()
                right[me] = build()
            return me

        build()
        if pos != len(nodes):
            raise SchemaError("trailing nodes after a complete tree")
        return {"feature": np.array(feature, dtype=np.int64),
                "threshold": np.array(threshold, dtype=float),
                "left": np.array(left, dtype=np.int64), "right": np.array(right, dtype=np.int64),
                "value": np.array(value, dtype=float)}


def _pure_nugget(v, dmax):
    return CovarianceParams(nugget=v, psill=0.0, range=(dmax if dmax > 0 else 1.0) / 4)


def fit_spatial_tree(X, y, sites, hyper: SpatRfHyper = SpatRfHyper(), seed=0, sample=None,
                     dist=None) -> SpatialTree:
    """Grow one spatially adjusted tree.

    Starting from a pure-nugget covariance, alternate (a) GLS tree growth on
    the bootstrap sample for the current covariance and (b) covariance ML on
    the tree residuals, ``hyper.rounds`` times. A regrown tree only replaces
    the previous structure (with GLS-refitted leaves) when it lowers the
    joint negative log-likelihood, so the objective never increases.

    Parameters
    ----------
    X, y : arrays on the modelling scale (all training sites)
    sites : Sites
    hyper : SpatRfHyper
    seed : int or numpy.random.SeedSequence
        Drives the bootstrap draw and covariate subsampling.
    sample : array_like of int, optional
        Explicit training sample (overrides the bootstrap draw). Repeated
        indices are collapsed: fitting uses the distinct sites of the draw,
        while :attr:`SpatialTree.bootstrap` records the draw itself.
    dist : numpy.ndarray, optional
        Pairwise distances between ``sites``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    sites = as_sites(sites)
    n, p = X.shape
    if n < 2 * hyper.min_leaf:
        raise ConfigurationError(f"need at least {2 * hyper.min_leaf} rows, got {n}")
    D = pairwise_distances(sites) if dist is None else dist
    rng = np.random.default_rng(seed)
    if sample is not None:
        draw = np.asarray(sample, dtype=np.int64)
    elif hyper.bootstrap:
        draw = np.sort(rng.integers(0, n, n))
    else:
        draw = np.arange(n)
    # Repeated sites carry identical residuals, which drives the ML nugget to
    # zero; the tree and its covariance are fitted on the distinct sites.
    idx = np.unique(draw)
    Xb, yb = X[idx], y[idx]
    Db = D[np.ix_(idx, idx)]
    sb = sites.subset(idx)
    fixed = dict(hyper.fixed)
    mtry = hyper.resolved_mtry(p)
    dmax = float(D.max())

    if np.ptp(yb) == 0:
        arrays = {"feature": np.array([-1], dtype=np.int64), "threshold": np.array([np.nan]),
                  "left": np.array([-1], dtype=np.int64), "right": np.array([-1], dtype=np.int64),
                  "value": np.array([float(yb[0])])}
        theta = _pure_nugget(1e-8 * max(1.0, float(yb[0]) ** 2), dmax)
        return _finish_tree(arrays, theta, X, y, sites, D, fixed, draw, ())

    theta = _pure_nugget(float(yb.var()), dmax)
    P = np.eye(idx.size) / theta.nugget
    arrays = grow_gls_tree(Xb, yb, P, hyper.min_leaf, hyper.max_depth, mtry, rng)
    Lb = cholesky_factor(cov_from_distances(Db, theta, square=True))
    trace = [_nll_from_factor(Lb, yb - _predict(arrays, Xb))]
    for rnd in range(hyper.rounds):
        res = yb - _predict(arrays, Xb)
        if np.ptp(res) == 0:
            break
        init = None if rnd == 0 else theta
        cov = fit_ml_or_best(res, sb, init=init, fixed=fixed, dist=Db)
        if rnd == 0 and cov.nll > trace[-1]:
            warm = fit_ml_or_best(res, sb, init=theta.replace(**fixed) if fixed else theta,
                                  fixed=fixed, dist=Db)
            cov = warm if warm.nll < cov.nll else cov
        if cov.nll > trace[-1]:
            break
        theta = cov.params
        trace.append(cov.nll)
        if rnd == hyper.rounds - 1:
            break
        P = cov.precision()
        cand = grow_gls_tree(Xb, yb, P, hyper.min_leaf, hyper.max_depth, mtry, rng)
        old = refit_leaf_values(arrays, Xb, yb, P)
        nll_new = _nll_from_factor(cov.factor, yb - _predict(cand, Xb))
        nll_old = _nll_from_factor(cov.factor, yb - _predict(old, Xb))
        if nll_new <= nll_old:
            arrays, nll = cand, nll_new
        else:
            arrays, nll = old, nll_old
        trace.append(nll)
    return _finish_tree(arrays, theta, X, y, sites, D, fixed, draw, tuple(trace))


def _predict(arrays, X):
    return kernels.tree_predict(X, arrays["feature"], arrays["threshold"], arrays["left"],
                                arrays["right"], arrays["value"])


def _finish_tree(arrays, theta, X, y, sites, D, fixed, idx, trace):
    resid = y - _predict(arrays, X)
    cov = FittedCovariance.build(theta, sites, resid, fixed, D)
    for a in arrays.values():
        a.setflags(write=False)
    idx = np.asarray(idx, dtype=np.int64)
    idx.setflags(write=False)
    return SpatialTree(arrays["feature"], arrays["threshold"], arrays["left"], arrays["right"],
                       arrays["value"], cov, idx, trace)


@dataclass(frozen=True, eq=False)
class SpatRfModel:
    """An averaged ensemble of :class:`SpatialTree` members."""

    trees: tuple
    hyper: SpatRfHyper
    link: LinkFunction = LinkFunction("identity")
    transform: str = "identity"
    names: tuple = ()
    seed: int = 0

    @property
    def K(self):
        return len(self.trees)

    @property
    def components(self):
        return self.trees

    @property
    def weights(self):
        return np.full(self.K, 1.0 / self.K)

    @property
    def train_sites(self) -> Sites:
        return self.trees[0].cov.train_sites

    @property
    def p(self):
        return None if not self.names else len(self.names)

    def predict(self, X_new, sites_new):
        return predict_spatrf(self, X_new, sites_new)

    def to_dict(self):
        s = self.train_sites
        return {
            "format_version": FORMAT_VERSION,
            "model": "spatrf",
            "K": self.K,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "names": list(self.names),
            "transform": self.transform,
            "link": self.link.kind,
            "train": {"site_id": s.ids.tolist(), "x": s.coords[:, 0].tolist(),
                      "y": s.coords[:, 1].tolist(), "metric": s.metric},
            "trees": [
                {"nodes": t.preorder(), "theta": t.theta.to_dict(), "fixed": dict(t.cov.fixed),
                 "residuals": t.cov.train_residuals.tolist(), "bootstrap": t.bootstrap.tolist()}
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("model") != "spatrf":
            raise SchemaError(f"not a spatial RF model file (model={d.get('model')!r})")
        if d.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported format_version {d.get('format_version')!r}")
        t = d["train"]
        sites = Sites(np.column_stack([t["x"], t["y"]]), ids=t["site_id"], metric=t["metric"])
        D = pairwise_distances(sites)
        trees = []
        for rec in d["trees"]:
            arrays = SpatialTree.arrays_from_preorder(rec["nodes"])
            cov = FittedCovariance.build(CovarianceParams.from_dict(rec["theta"]), sites,
                                         rec["residuals"], rec.get("fixed", {}), D)
            trees.append(SpatialTree(arrays["feature"], arrays["threshold"], arrays["left"],
                                     arrays["right"], arrays["value"], cov,
                                     np.array(rec["bootstrap"], dtype=np.int64)))
        return cls(tuple(trees), SpatRfHyper.from_dict(d["hyper"]), LinkFunction(d["link"]),
                   d["transform"], tuple(d["names"]), d.get("seed", 0))


def _tree_job(args):
    X, y, sites, hyper, seed, D = args
    return fit_spatial_tree(X, y, sites, hyper, seed=seed, dist=D)


def fit_spatrf(data: Dataset, K=200, hyper: SpatRfHyper | None = None, seed=0,
               link="identity", workers=1) -> SpatRfModel:
    """Fit a spatial random forest of ``K`` trees.

    Tree ``k`` draws its bootstrap sample and covariate subsets from the
    ``k``-th child of ``numpy.random.SeedSequence(seed)``, so results do not
    depend on ``workers``.
    """
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    hyper = SpatRfHyper() if hyper is None else hyper
    lk = LinkFunction(link) if isinstance(link, str) else link
    y = model_target(data.y, data.transform, lk)
    D = pairwise_distances(data.sites)
    seeds = np.random.SeedSequence(seed).spawn(K)
    jobs = [(data.X, y, data.sites, hyper, s, D) for s in seeds]
    if workers and workers > 1 and K > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            trees = list(ex.map(_tree_job, jobs))
    else:
        trees = [_tree_job(j) for j in jobs]
    return SpatRfModel(tuple(trees), hyper, lk, data.transform, data.names, seed)


def predict_spatrf(model: SpatRfModel, X_new, sites_new, return_parts=False):
    """Average over trees of tree mean plus kriged tree residuals, back-transformed.

    With ``return_parts=True`` also return the averaged mean and kriging
    terms on the modelling (link) scale.
    """
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    p = int(model.trees[0].feature.max()) + 1 if model.p is None else model.p
    if model.p is not None and X_new.shape[1] != p:
        raise ConfigurationError(f"expected {p} covariate columns, got {X_new.shape[1]}")
    sites_new = as_sites(sites_new)
    if len(sites_new) != X_new.shape[0]:
        raise ConfigurationError("X_new and sites_new differ in length")
    Dx = cross_distances(sites_new, model.train_sites)
    w = model.weights
    mean = np.zeros(X_new.shape[0])
    kr = np.zeros(X_new.shape[0])
    for wk, tree in zip(w, model.trees):
        mean += wk * tree.predict_mean(X_new)
        kr += wk * krige(tree.cov, sites_new, dist=Dx)
    pred = to_outcome_scale(mean + kr, model.transform, model.link)
    if return_parts:
        return pred, mean, kr
    return pred
