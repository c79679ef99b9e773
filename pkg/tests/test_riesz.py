import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from autodml.data import philox
from autodml.functionals import AvgDerivative, moment_rows
from autodml.riesz import (DantzigConfig, DantzigMDRiesz, LassoMDConfig, LassoMDRiesz,
                           coordinate_descent, fit_dantzig_md, fit_lasso_md, kkt_residual,
                           soft_threshold_update, theoretical_r_L)
from autodml.sim import DesignSpec, generate, oracle_dantzig_small


def _instance(rng, p, n=None):
    n = n or 2 * p + 5
    B = rng.standard_normal((n, p))
    G = B.T @ B / n
    M = rng.standard_normal(p)
    return M, G


def test_theoretical_r_L_value():
    # 0.1 * Phi^{-1}(1 - 0.1/48) from a 40-digit quantile
    assert theoretical_r_L(100, 24, 1.0, 0.1) == pytest.approx(0.28652602385321332, abs=1e-12)


def test_theoretical_r_L_linear_in_c1_and_increasing_in_p():
    assert theoretical_r_L(100, 24, 2.0, 0.1) == 2 * theoretical_r_L(100, 24, 1.0, 0.1)
    values = [theoretical_r_L(100, p) for p in (1, 2, 5, 10, 100, 1000, 10**6)]
    assert all(a < b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        theoretical_r_L(0, 3)


@pytest.mark.parametrize("pi,z,thr,expected", [(0.5, 1.0, 1.0, 0.0), (2.0, 1.0, 1.0, 1.0),
                                               (-3.0, 2.0, 1.0, -1.0)])
def test_soft_threshold_cases(pi, z, thr, expected):
    assert soft_threshold_update(pi, z, thr) == expected


def test_soft_threshold_guards():
    with pytest.raises(ValueError, match="degenerate diagonal"):
        soft_threshold_update(1.0, 0.0, 0.1)


def test_one_dimensional_lasso():
    res = coordinate_descent(np.array([2.0]), np.array([[1.0]]), 0.5)
    assert abs(res.coef[0] - 1.5) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_one_dimensional_lasso_closed_form(seed):
    rng = philox(seed)
    M, g, r, D = rng.standard_normal(), rng.uniform(0.1, 3), rng.uniform(0, 2), rng.uniform(0.2, 2)
    res = coordinate_descent(np.array([M]), np.array([[g]]), r, np.array([D]))
    expected = np.sign(M) * max(abs(M) - r * D, 0.0) / g
    assert abs(res.coef[0] - expected) <= 1e-10


def test_unpenalized_limit_and_full_shrinkage():
    rng = philox(2)
    M, G = _instance(rng, 6)
    res = coordinate_descent(M, G, 0.0, tol=1e-14)
    np.testing.assert_allclose(res.coef, np.linalg.solve(G, M), atol=1e-8)
    D = rng.uniform(0.5, 2, 6)
    r = np.max(np.abs(M) / D)
    np.testing.assert_array_equal(coordinate_descent(M, G, r, D).coef, 0.0)


def test_zero_target_gives_zero_fit():
    rng = philox(3)
    B = rng.standard_normal((50, 8))
    fit = fit_lasso_md(B, np.zeros((50, 8)))
    np.testing.assert_array_equal(fit.coef, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 30), st.floats(0.01, 1.0))
def test_kkt_certificate(seed, p, r):
    rng = philox(seed)
    M, G = _instance(rng, p)
    D = rng.uniform(0.3, 2.0, p)
    res = coordinate_descent(M, G, r, D, c3=0.1)
    assert res.converged
    thr = r * D
    thr[0] *= 0.1
    g = M - G @ res.coef
    assert np.max(np.maximum(0, np.abs(g) - thr)) <= 1e-6
    assert kkt_residual(M, G, res.coef, thr) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 25))
def test_objective_never_increases(seed, p):
    rng = philox(seed)
    M, G = _instance(rng, p)
    res = coordinate_descent(M, G, 0.1, rng.uniform(0.5, 1.5, p), trace=True)
    obj = res.objective
    assert np.all(np.diff(obj) <= 1e-12 * np.maximum(1.0, np.abs(obj[:-1])))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 15), st.floats(0.1, 10.0))
def test_homogeneity_with_fixed_normalization(seed, p, scale):
    rng = philox(seed)
    M, G = _instance(rng, p)
    D = rng.uniform(0.5, 1.5, p)
    a = coordinate_descent(M, G, 0.2, D, tol=1e-13).coef
    b = coordinate_descent(scale * M, G, 0.2 * scale, D, tol=1e-13).coef
    np.testing.assert_allclose(b, scale * a, atol=1e-8 * scale)


def test_intercept_discount_applies_to_first_term_only():
    rng = philox(4)
    B = np.column_stack([np.ones(80), rng.standard_normal((80, 4))])
    m = B * rng.standard_normal(80)[:, None]
    with_c3 = fit_lasso_md(B, m, intercept=True)
    without = fit_lasso_md(B, m, intercept=False)
    assert with_c3.c3 == 0.1 and without.c3 == 1.0
    np.testing.assert_allclose(with_c3.thresholds[1:], with_c3.r_L * with_c3.D[1:])
    assert with_c3.thresholds[0] == pytest.approx(0.1 * with_c3.r_L * with_c3.D[0])


def test_tuner_diagnostics():
    rng = philox(5)
    B = rng.standard_normal((120, 30))
    y = B[:, 0] + rng.standard_normal(120)
    fit = fit_lasso_md(B, y[:, None] * B)
    assert fit.converged and not fit.flags
    assert 1 <= fit.outer_iters <= 10
    assert fit.r_L == pytest.approx(theoretical_r_L(120, 30))
    assert np.all(fit.D >= 0.2)
    assert fit.kkt_residual <= 1e-6
    fixed = fit_lasso_md(B, y[:, None] * B, LassoMDConfig(fixed_r_L=0.5, normalize=False))
    assert fixed.r_L == 0.5 and fixed.outer_iters == 1
    np.testing.assert_array_equal(fixed.D, 1.0)


def test_config_validation():
    with pytest.raises(ValueError, match="c2"):
        LassoMDConfig(c2=1.5)
    with pytest.raises(ValueError, match="c3"):
        LassoMDConfig(c3=0.0)
    with pytest.raises(ValueError, match="lambda_d"):
        DantzigConfig(0.0)


def test_dantzig_zero_when_lambda_covers_target():
    rng = philox(6)
    M, G = _instance(rng, 5)
    fit = fit_dantzig_md(M, G, DantzigConfig(np.max(np.abs(M))))
    np.testing.assert_array_equal(fit.coef, 0.0)


def test_dantzig_one_dimensional():
    fit = fit_dantzig_md(np.array([2.0]), np.array([[1.0]]), DantzigConfig(0.5))
    assert abs(fit.coef[0] - 1.5) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.01, 2.0))
def test_lasso_and_dantzig_agree_in_one_dimension(seed, lam):
    rng = philox(seed)
    M, g = np.array([rng.standard_normal() * 3]), np.array([[rng.uniform(0.2, 3)]])
    a = coordinate_descent(M, g, lam).coef
    b = fit_dantzig_md(M, g, DantzigConfig(lam)).coef
    assert abs(a[0] - b[0]) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 4), st.floats(0.02, 0.5))
def test_dantzig_matches_vertex_enumeration(seed, p, lam):
    rng = philox(seed)
    M, G = _instance(rng, p)
    fit = fit_dantzig_md(M, G, DantzigConfig(lam))
    _, best = oracle_dantzig_small(M, G, lam)
    assert abs(np.abs(fit.coef).sum() - best) <= 1e-6
    assert np.max(np.abs(M - G @ fit.coef)) <= lam + 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(5, 60))
def test_dantzig_warm_and_cold_agree(seed, p):
    rng = philox(seed)
    _, G = _instance(rng, p, n=p // 2 + 3)
    lam = 0.3
    # singular G: keep M near its range so the program stays feasible
    M = G @ rng.standard_normal(p) + rng.uniform(-lam / 2, lam / 2, p)
    warm = fit_dantzig_md(M, G, DantzigConfig(lam))
    cold = fit_dantzig_md(M, G, DantzigConfig(lam, warm_start=False))
    assert abs(np.abs(warm.coef).sum() - np.abs(cold.coef).sum()) <= 1e-7
    assert np.max(np.abs(M - G @ warm.coef)) <= lam + 1e-8


def test_estimator_wrappers():
    rng = philox(7)
    B = rng.standard_normal((100, 6))
    y = B[:, 1] + 0.5 * rng.standard_normal(100)
    est = LassoMDRiesz(c3=0.5, intercept=False).fit(B, y[:, None] * B)
    assert clone(est).get_params()["c3"] == 0.5
    np.testing.assert_allclose(est.predict(B), B @ est.coef_)
    dz = DantzigMDRiesz().fit(B, y[:, None] * B)
    assert np.max(np.abs((y[:, None] * B).mean(0) - B.T @ B / 100 @ dz.coef_)) \
        <= theoretical_r_L(100, 6) + 1e-8


@pytest.mark.slow
def test_riesz_error_shrinks_with_sample_size():
    def err(n, seed):
        data, truth = generate(DesignSpec("riesz_sparse", n, seed))
        dic = truth.extras["dictionary"]
        B = dic.at(data)
        fit = fit_lasso_md(B, moment_rows(AvgDerivative("x1"), dic, data), intercept=dic.has_intercept)
        return float(np.mean((B @ fit.coef - truth.alpha.at(data)) ** 2))

    small = np.median([err(500, s) for s in range(20)])
    large = np.median([err(4000, s) for s in range(20)])
    assert large < small
