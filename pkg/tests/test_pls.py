
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_sites
from spatvim.exceptions import ConfigurationError, DegenerateInputError
from spatvim.pls import NoSignalWarning, PlsProjection, fit_pls, fold_ids, project, select_components_cv


def _fitted(X, y, l):
    T = project(fit_pls(X, y, l), X)
    return oracles.ols_fitted(np.column_stack([np.ones(len(y)), T]), y)


def test_single_covariate_matches_simple_regression(rng):
    x = rng.normal(size=(30, 1))
    y = 2 * x[:, 0] + rng.normal(size=30)
    proj = fit_pls(x, y, 1)
    T = project(proj, x)
    z = (x[:, 0] - x[:, 0].mean()) / x[:, 0].std()
    assert abs(abs(np.corrcoef(T[:, 0], z)[0, 1]) - 1) < 1e-12
    np.testing.assert_allclose(_fitted(x, y, 1), oracles.ols_fitted(np.column_stack([np.ones(30), x]), y),
                               atol=1e-10)


def test_full_rank_span_matches_ols(rng):
    for _ in range(5):
        X = rng.normal(size=(40, 6))
        y = X @ rng.normal(size=6) + rng.normal(size=40)
        np.testing.assert_allclose(_fitted(X, y, 6),
                                   oracles.ols_fitted(np.column_stack([np.ones(40), X]), y), atol=1e-8)


def test_constant_response_rejected(rng):
    with pytest.raises(DegenerateInputError, match="zero covariance"):
        fit_pls(rng.normal(size=(10, 3)), np.ones(10), 1)


def test_zero_variance_column_named(rng):
    X = rng.normal(size=(10, 3))
    X[:, 1] = 4.0
    with pytest.raises(DegenerateInputError, match="'b'"):
        fit_pls(X, rng.normal(size=10), 1, names=["a", "b", "c"])


def test_component_bounds(rng):
    X = rng.normal(size=(5, 8))
    with pytest.raises(ConfigurationError):
        fit_pls(X, rng.normal(size=5), 5)
    with pytest.raises(ConfigurationError):
        fit_pls(X, rng.normal(size=5), 0)


def test_project_training_and_center(rng):
    X = rng.normal(size=(20, 4))
    y = X[:, 0] + rng.normal(size=20)
    proj = fit_pls(X, y, 2)
    Xs = (X - X.mean(0)) / X.std(0)
    np.testing.assert_allclose(project(proj, X), Xs @ proj.H, atol=1e-14)
    np.testing.assert_allclose(project(proj, proj.x_center), np.zeros((1, 2)), atol=1e-15)
    with pytest.raises(ConfigurationError):
        project(proj, X[:, :3])


def test_project_is_affine(rng):
    X = rng.normal(size=(20, 4))
    proj = fit_pls(X, X[:, 1] + rng.normal(size=20), 3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    lhs = project(proj, 0.3 * A + 0.7 * B)
    rhs = 0.3 * project(proj, A) + 0.7 * project(proj, B)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    np.testing.assert_allclose(project(proj, A), ((A - proj.x_center) / proj.x_scale) @ proj.H, atol=1e-14)


@given(st.integers(0, 100_000))
def test_scores_are_orthogonal(seed):
    rng = np.random.default_rng(seed)
    n, p = rng.integers(6, 40), rng.integers(1, 9)
    l = int(rng.integers(1, min(p, n - 1) + 1))
    X = rng.normal(size=(n, p)) @ rng.normal(size=(p, p))
    y = X @ rng.normal(size=p) + rng.normal(size=n)
    T = project(fit_pls(X, y, l), X)
    G = T.T @ T
    scale = np.sqrt(np.outer(np.diag(G), np.diag(G)))
    off = np.abs(G - np.diag(np.diag(G))) / scale
    assert off.max(initial=0) < 1e-8


@given(st.integers(0, 100_000))
def test_column_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=25)
    perm = rng.permutation(5)
    np.testing.assert_allclose(_fitted(X, y, 3), _fitted(X[:, perm], y, 3), atol=1e-9)


@given(st.integers(0, 100_000), st.floats(1e-3, 1e3))
def test_scale_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 5))
    y = X @ rng.normal(size=5) + rng.normal(size=25)
    X2 = X.copy()
    X2[:, 2] *= c
    np.testing.assert_allclose(_fitted(X, y, 2), _fitted(X2, y, 2), atol=1e-8)


def test_serialization_roundtrip(rng):
    X = rng.normal(size=(12, 3))
    proj = fit_pls(X, X[:, 0] + rng.normal(size=12), 2)
    back = PlsProjection.from_dict(proj.to_dict())
    np.testing.assert_array_equal(project(back, X), project(proj, X))


def test_fold_ids_near_equal():
    ids = fold_ids(23, 5, 0)
    counts = np.bincount(ids)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 23
    np.testing.assert_array_equal(ids, fold_ids(23, 5, 0))


def test_select_two_latent_directions():
    rng = np.random.default_rng(3)
    n = 60
    Z = rng.normal(size=(n, 2))
    X = np.column_stack([Z[:, 0], Z[:, 1], Z[:, 0] + Z[:, 1], Z[:, 0] - Z[:, 1], 0.5 * Z[:, 0]])
    X = X + 1e-6 * rng.normal(size=X.shape)
    y = 2 * Z[:, 0] - Z[:, 1]
    l = select_components_cv(X, y, random_sites(rng, n), l_max=4, folds=5, seed=0,
                             fixed={"psill": 0.0})
    assert l == 2


def test_select_single_covariate(rng):
    X = rng.normal(size=(20, 1))
    assert select_components_cv(X, X[:, 0], random_sites(rng, 20)) == 1


def test_select_flags_no_signal():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 3))
    with pytest.warns(NoSignalWarning):
        l, scores = select_components_cv(X, rng.normal(size=40), random_sites(rng, 40), l_max=3,
                                         fixed={"psill": 0.0}, return_scores=True)
    assert 1 <= l <= 3 and scores.shape == (3,)


def test_select_validation(rng):
    X = rng.normal(size=(10, 3))
    with pytest.raises(ConfigurationError):
        select_components_cv(X, X[:, 0], random_sites(rng, 10), l_max=4)
    with pytest.raises(ConfigurationError):
        select_components_cv(X, X[:, 0], random_sites(rng, 10), folds=1)
