import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_sites
from spatvim.core import Sites, pairwise_distances
from spatvim.covariance import (CovarianceParams, FittedCovariance, cholesky_factor,
                                cov_from_distances, cov_matrix, default_init, fit_ml,
                                fit_ml_or_best, gls_coefficients, krige, loo_weights,
                                neg_log_likelihood)
from spatvim.exceptions import ConvergenceError, DegenerateInputError, NumericalRankError


def test_params_validation():
    with pytest.raises(ValueError):
        CovarianceParams(0, 0, 1)
    with pytest.raises(ValueError):
        CovarianceParams(-1, 1, 1)
    with pytest.raises(ValueError):
        CovarianceParams(1, 1, 0)
    with pytest.raises(ValueError):
        CovarianceParams(1, 1, math.inf)
    th = CovarianceParams(1, 2, 3)
    assert CovarianceParams.from_dict(th.to_dict()) == th
    assert th.replace(psill=0).psill == 0.0


def test_single_site_diagonal():
    S = cov_matrix(Sites([[0, 0]]), None, CovarianceParams(1, 2, 1))
    assert S.tolist() == [[3.0]]


def test_pure_nugget_blocks(rng):
    a, b = random_sites(rng, 4), random_sites(rng, 3)
    th = CovarianceParams(1.5, 0.0, 1.0)
    np.testing.assert_array_equal(cov_matrix(a, None, th), 1.5 * np.eye(4))
    np.testing.assert_array_equal(cov_matrix(a, b, th), np.zeros((4, 3)))


def test_kernel_value_at_one_range():
    s = Sites([[0, 0], [2.5, 0]])
    S = cov_matrix(s, None, CovarianceParams(0, 4, 2.5))
    assert S[0, 1] == pytest.approx(oracles.KERNEL_4_EXP_M1, rel=1e-15)


def test_cross_block_has_no_nugget():
    s = Sites([[0, 0], [1, 0]])
    t = Sites([[0, 0]])
    C = cov_matrix(t, s, CovarianceParams(0.7, 2, 1))
    assert C[0, 0] == 2.0


def test_nll_identity_cases():
    s = Sites([[0, 0], [5, 5]])
    th = CovarianceParams(1, 0, 1)
    assert neg_log_likelihood([0, 0], s, th) == pytest.approx(math.log(2 * math.pi), rel=1e-14)
    assert neg_log_likelihood([1, 1], s, th) == pytest.approx(math.log(2 * math.pi) + 1, rel=1e-14)


def test_nll_two_by_two_closed_form():
    s = Sites([[0, 0], [1, 0]])
    v = neg_log_likelihood([1, -1], s, CovarianceParams(0, 1, 1))
    assert v == pytest.approx(oracles.NLL_2X2, rel=1e-13)
    S = oracles.exp_cov(s.coords, s.coords, 0, 1, 1, same=True)
    assert v == pytest.approx(oracles.nll_dense([1, -1], S), rel=1e-13)


def test_nll_duplicate_sites_zero_nugget_raises():
    s = Sites([[0, 0], [0, 0], [1, 1]])
    with pytest.raises(NumericalRankError):
        neg_log_likelihood([1, 2, 3], s, CovarianceParams(0, 1, 1))


def test_duplicates_factorize_with_positive_nugget():
    s = Sites([[0, 0], [0, 0], [0, 0]])
    assert np.isfinite(neg_log_likelihood([1, 2, 3], s, CovarianceParams(1e-6, 1, 1)))


@given(st.integers(0, 10_000))
def test_nll_invariant_under_reordering(seed):
    rng = np.random.default_rng(seed)
    s = random_sites(rng, 6)
    r = rng.normal(size=6)
    th = CovarianceParams(rng.uniform(0.1, 1), rng.uniform(0, 2), rng.uniform(0.1, 2))
    perm = rng.permutation(6)
    a = neg_log_likelihood(r, s, th)
    b = neg_log_likelihood(r[perm], s.subset(perm), th)
    assert a == pytest.approx(b, rel=1e-12)


@given(st.integers(0, 10_000))
def test_factor_reconstructs_covariance(seed):
    rng = np.random.default_rng(seed)
    s = random_sites(rng, 7)
    th = CovarianceParams(rng.uniform(0.01, 1), rng.uniform(0, 3), rng.uniform(0.05, 2))
    f = FittedCovariance.build(th, s, rng.normal(size=7))
    S = cov_matrix(s, None, th)
    np.testing.assert_allclose(f.covariance(), S, rtol=1e-8, atol=1e-12 * np.abs(S).max())


def _simulate_field(rng, n, th):
    s = random_sites(rng, n, side=10.0)
    L = np.linalg.cholesky(cov_matrix(s, None, th))
    return s, L @ rng.normal(size=n)


def test_fit_ml_recovers_parameters_within_factor_two():
    rng = np.random.default_rng(2024)
    truth = CovarianceParams(1, 4, 2.5)
    s, r = _simulate_field(rng, 400, truth)
    fit = fit_ml(r, s)
    for name in ("nugget", "psill", "range"):
        ratio = getattr(fit.params, name) / getattr(truth, name)
        assert 0.5 <= ratio <= 2.0, (name, ratio)


def test_fit_ml_never_worse_than_init():
    rng = np.random.default_rng(5)
    truth = CovarianceParams(1, 4, 2.5)
    s, r = _simulate_field(rng, 150, truth)
    fit = fit_ml(r, s, init=truth)
    assert fit.nll <= neg_log_likelihood(r, s, truth) + 1e-9


def test_fit_ml_iid_noise_is_mostly_nugget():
    rng = np.random.default_rng(11)
    s = random_sites(rng, 400, side=10.0)
    fit = fit_ml(rng.normal(size=400), s)
    th = fit.params
    assert th.psill / (th.psill + th.nugget) < 0.5


def test_fit_ml_degenerate_inputs(rng):
    s = random_sites(rng, 5)
    with pytest.raises(DegenerateInputError):
        fit_ml(np.ones(5), s)
    with pytest.raises(DegenerateInputError):
        fit_ml([1.0, 2.0], s.subset([0, 1]))
    with pytest.raises(DegenerateInputError):
        fit_ml([1.0, np.nan, 2.0, 3.0, 4.0], s)


def test_fit_ml_budget_exhaustion_carries_best(rng):
    s, r = _simulate_field(rng, 60, CovarianceParams(1, 4, 2.5))
    with pytest.raises(ConvergenceError) as err:
        fit_ml(r, s, max_iter=3)
    best = err.value.best
    assert isinstance(best, FittedCovariance)
    assert best.nll <= neg_log_likelihood(r, s, default_init(r, pairwise_distances(s))) + 1e-9
    assert fit_ml_or_best(r, s, max_iter=3).nll == best.nll


def test_fit_ml_respects_fixed(rng):
    s, r = _simulate_field(rng, 80, CovarianceParams(1, 4, 2.5))
    fit = fit_ml(r, s, fixed={"psill": 0.0})
    assert fit.params.psill == 0.0
    assert fit.fixed_dict == {"psill": 0.0}
    assert fit.params.nugget == pytest.approx(np.mean(r ** 2), rel=1e-3)


def test_fit_ml_respects_bounds(rng):
    s, r = _simulate_field(rng, 60, CovarianceParams(1, 4, 2.5))
    fit = fit_ml(r, s)
    v, dmax = r.var(), pairwise_distances(s).max()
    th = fit.params
    assert 1e-8 * v * (1 - 1e-9) <= th.nugget <= 1e3 * v * (1 + 1e-9)
    assert 1e-3 * dmax * (1 - 1e-9) <= th.range <= 10 * dmax * (1 + 1e-9)


def test_krige_zero_psill(rng):
    s = random_sites(rng, 5)
    f = FittedCovariance.build(CovarianceParams(1, 0, 1), s, rng.normal(size=5))
    np.testing.assert_array_equal(krige(f, random_sites(rng, 3)), np.zeros(3))


def test_krige_interpolates_without_nugget(rng):
    s = random_sites(rng, 6)
    r = rng.normal(size=6)
    f = FittedCovariance.build(CovarianceParams(0, 2, 0.7), s, r)
    pred = krige(f, Sites(s.coords[[2, 4]]))
    np.testing.assert_allclose(pred, r[[2, 4]], atol=1e-10)


def test_krige_three_by_one_oracle():
    train, test, r, (nug, ps, rg) = oracles.krige_3x1_instance()
    f = FittedCovariance.build(CovarianceParams(nug, ps, rg), Sites(train), r)
    v = krige(f, Sites(test))[0]
    assert v == pytest.approx(oracles.KRIGE_3X1, abs=1e-12)
    assert v == pytest.approx(oracles.krige_partitioned(train, test, r, nug, ps, rg)[0], abs=1e-12)


def test_krige_far_field_vanishes(rng):
    s = random_sites(rng, 5)
    f = FittedCovariance.build(CovarianceParams(0.1, 2, 0.5), s, rng.normal(size=5))
    assert abs(krige(f, Sites([[1e4, 1e4]]))[0]) < 1e-300


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_krige_linear_in_residuals(seed, a):
    rng = np.random.default_rng(seed)
    s, t = random_sites(rng, 5), random_sites(rng, 3)
    r = rng.normal(size=5)
    th = CovarianceParams(rng.uniform(0.01, 1), rng.uniform(0.1, 3), rng.uniform(0.1, 2))
    k1 = krige(FittedCovariance.build(th, s, r), t)
    k2 = krige(FittedCovariance.build(th, s, a * r), t)
    np.testing.assert_allclose(k2, a * k1, atol=1e-10 * (1 + abs(a)))


@given(st.integers(0, 10_000))
def test_krige_with_nugget_shrinks(seed):
    rng = np.random.default_rng(seed)
    s = random_sites(rng, 6)
    r = rng.normal(size=6)
    th = CovarianceParams(rng.uniform(0.1, 1), rng.uniform(0.1, 3), rng.uniform(0.1, 2))
    f = FittedCovariance.build(th, s, r)
    pred = krige(f, s.subset(np.arange(6)))
    P = f.precision()
    assert pred @ P @ pred <= r @ P @ r + 1e-10
    assert np.linalg.norm(pred - r) > 0


@given(st.integers(0, 10_000))
def test_loo_weights_match_explicit_deletion(seed):
    rng = np.random.default_rng(seed)
    n = 6
    s = random_sites(rng, n)
    th = CovarianceParams(rng.uniform(0.01, 1), rng.uniform(0.1, 3), rng.uniform(0.1, 2))
    f = FittedCovariance.build(th, s, rng.normal(size=n))
    A = loo_weights(f)
    S = cov_matrix(s, None, th)
    for i in range(n):
        keep = [j for j in range(n) if j != i]
        w = S[i, keep] @ np.linalg.inv(S[np.ix_(keep, keep)])
        np.testing.assert_allclose(A[i, keep], w, atol=1e-10)
        assert A[i, i] == 0.0


def test_gls_matches_dense_formula(rng):
    s = random_sites(rng, 8)
    th = CovarianceParams(0.3, 1.0, 0.4)
    S = cov_matrix(s, None, th)
    F = np.column_stack([np.ones(8), rng.normal(size=8)])
    y = rng.normal(size=8)
    beta = gls_coefficients(F, y, cholesky_factor(S))
    np.testing.assert_allclose(beta, oracles.gls_dense(F, y, S), rtol=1e-10)


def test_cholesky_jitter_only_on_failure():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = cholesky_factor(S)
    assert np.isfinite(L).all()
    good = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_array_equal(cholesky_factor(good), np.linalg.cholesky(good))


def test_cov_from_distances_does_not_mutate():
    D = np.array([[0.0, 1.0], [1.0, 0.0]])
    cov_from_distances(D, CovarianceParams(1, 0, 1), square=True)
    assert D[0, 0] == 0.0
