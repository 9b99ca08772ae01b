from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ablasso.errors import BadParameter, ConvergenceError, ShapeError
from ablasso.lasso import (
    default_penalty,
    kkt_violation,
    lag_weights,
    lasso_objective,
    post_lasso_refit,
    predict,
    solve_weighted_lasso,
)
from oracles import lasso_brute_force

# 2 c sqrt(n) Phi^{-1}(1 - alpha / (2 m)) evaluated with mpmath at 30 digits
PENALTY_ORACLE = [
    ((100, 1, 1.0, 0.1), 32.89707253902945),
    ((100, 50, 1.0, 0.1), 61.80464612335627),
    ((37, 7, 3.0, 0.05), 98.17978460520125),
]


def _design(n, m, rng, scale=1.0):
    return np.column_stack([np.ones(n), scale * rng.standard_normal((n, m))])


@pytest.mark.parametrize("args,expected", PENALTY_ORACLE)
def test_default_penalty_matches_high_precision_quantile(args, expected):
    assert default_penalty(*args) == pytest.approx(expected, rel=1e-13)


def test_default_penalty_edges():
    assert default_penalty(100, 7, c=0.0) == 0.0
    with pytest.raises(BadParameter):
        default_penalty(100, 1, alpha_mass=2.0)
    with pytest.raises(BadParameter):
        default_penalty(0, 1)
    assert default_penalty(400, 5, c=2.0) == pytest.approx(4 * default_penalty(100, 5))


def test_lag_weights():
    cols = (("const", None), ("outcome", 2), ("outcome", 1), ("d", 3), ("d", 2), ("d", 1))
    assert lag_weights(cols, 4).tolist() == [0, 1, 1, 1, 1, 1]
    w = lag_weights(cols, 4, "distance")
    assert w[0] == 0
    assert w[3] == 1.0 and w[5] == 3.0
    with pytest.raises(BadParameter):
        lag_weights(cols, 4, "bogus")


def test_huge_penalty_gives_intercept_only():
    rng = np.random.default_rng(0)
    x = _design(50, 6, rng)
    y = rng.standard_normal(50) * 3 + 2
    fit = solve_weighted_lasso(x, y, 1e12 * np.abs(y).max())
    assert fit.support == ()
    assert np.all(fit.coefficients[1:] == 0)
    assert fit.coefficients[0] == pytest.approx(y.mean(), abs=1e-12)


def test_zero_penalty_is_ols():
    rng = np.random.default_rng(1)
    x = _design(80, 5, rng)
    y = x @ rng.standard_normal(6) + rng.standard_normal(80)
    fit = solve_weighted_lasso(x, y, 0.0)
    ols = np.linalg.solve(x.T @ x, x.T @ y)
    assert np.allclose(fit.coefficients, ols, atol=1e-6)


def test_grid_search_cannot_beat_solution():
    rng = np.random.default_rng(2)
    x = _design(40, 2, rng)
    y = x @ np.array([0.5, 1.0, -0.3]) + rng.standard_normal(40)
    lam = 15.0
    fit = solve_weighted_lasso(x, y, lam)
    w = fit.weights
    grid = [np.linspace(c - 1.0, c + 1.0, 20) for c in fit.coefficients]
    mesh = np.stack(np.meshgrid(*grid, indexing="ij"), axis=-1).reshape(-1, 3)
    r = y[None, :] - mesh @ x.T
    obj = np.sum(r * r, axis=1) + lam * np.abs(mesh) @ w
    assert fit.objective_value <= obj.min() + 1e-9
    assert fit.objective_value == pytest.approx(lasso_objective(x, y, fit.coefficients, lam, w))


@pytest.mark.parametrize("seed", range(20))
def test_matches_sign_pattern_enumeration(seed):
    rng = np.random.default_rng(seed)
    m = 1 + seed % 3
    n = 10 + 3 * seed
    x = _design(n, m, rng, scale=rng.uniform(0.5, 3))
    y = x @ rng.standard_normal(m + 1) + rng.standard_normal(n)
    lam = rng.uniform(0, 2) * np.abs(x[:, 1:].T @ (y - y.mean())).max()
    w = np.concatenate([[0.0], rng.uniform(0.2, 2, m)])
    fit = solve_weighted_lasso(x, y, lam, w)
    assert np.allclose(fit.coefficients, lasso_brute_force(x, y, lam, w), atol=1e-6)
    assert kkt_violation(fit, x, y) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 60), st.integers(1, 25), st.floats(0.01, 3.0))
def test_kkt_certificate(seed, n, m, frac):
    rng = np.random.default_rng(seed)
    x = _design(n, m, rng)
    y = x[:, 1:3].sum(axis=1) + rng.standard_normal(n)
    lam = frac * 2 * np.abs((x[:, 1:] - x[:, 1:].mean(axis=0)).T @ (y - y.mean())).max()
    fit = solve_weighted_lasso(x, y, lam)
    assert kkt_violation(fit, x, y) < 1e-6
    off = np.setdiff1d(np.arange(1, m + 1), fit.support)
    assert np.all(fit.coefficients[off] == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_scaling_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    x = _design(30, 4, rng)
    y = x @ np.array([1.0, 2.0, 0.0, -1.0, 0.5]) + rng.standard_normal(30)
    lam = 20.0
    a = solve_weighted_lasso(x, y, lam, tol=1e-12)
    b = solve_weighted_lasso(x, k * y, k * lam, tol=1e-12)
    assert np.allclose(b.coefficients, k * a.coefficients, rtol=1e-7, atol=1e-9 * k)


def test_objective_decreases_across_sweeps():
    rng = np.random.default_rng(4)
    x = _design(100, 30, rng)
    x[:, 2] = x[:, 1] + 0.05 * rng.standard_normal(100)  # slow mixing
    y = x[:, 1] + rng.standard_normal(100)
    fit = solve_weighted_lasso(x, y, 5.0, record_trace=True)
    tr = fit.objective_trace
    assert tr.size == fit.n_sweeps > 1
    assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))


def test_non_convergence_carries_last_iterate():
    rng = np.random.default_rng(5)
    x = _design(50, 20, rng)
    y = rng.standard_normal(50)
    with pytest.raises(ConvergenceError) as info:
        solve_weighted_lasso(x, y, 0.1, max_sweeps=1, tol=1e-15)
    assert info.value.last_iterate.shape == (21,)


def test_shape_and_parameter_errors():
    x = np.ones((5, 3))
    with pytest.raises(ShapeError):
        solve_weighted_lasso(x, np.ones(4), 1.0)
    with pytest.raises(ShapeError):
        solve_weighted_lasso(x, np.ones(5), 1.0, weights=np.ones(2))
    with pytest.raises(BadParameter):
        solve_weighted_lasso(x, np.ones(5), 1.0, weights=np.array([1.0, 1.0, 1.0]))
    with pytest.raises(BadParameter):
        solve_weighted_lasso(x, np.ones(5), -1.0)
    with pytest.raises(ShapeError):
        post_lasso_refit(np.empty((0, 0)), np.empty(0), ())


def test_post_lasso_refit():
    rng = np.random.default_rng(6)
    x = _design(60, 4, rng)
    y = x @ np.array([1.0, 2.0, 0.0, 0.0, -1.0]) + 0.1 * rng.standard_normal(60)
    full = post_lasso_refit(x, y, (1, 2, 3, 4))
    assert np.allclose(full.coefficients, np.linalg.lstsq(x, y, rcond=None)[0], atol=1e-10)
    empty = post_lasso_refit(x, y, ())
    assert empty.coefficients[0] == pytest.approx(y.mean())
    assert np.all(empty.coefficients[1:] == 0)
    part = post_lasso_refit(x, y, (1, 4))
    assert part.post_refit and part.coefficients[2] == 0 and part.coefficients[3] == 0


def test_post_lasso_duplicated_column_is_minimum_norm():
    rng = np.random.default_rng(7)
    x = _design(40, 3, rng)
    x[:, 2] = x[:, 1]
    y = 2 * x[:, 1] + rng.standard_normal(40)
    fit = post_lasso_refit(x, y, (1, 2))
    sub = x[:, [0, 1, 2]]
    assert np.all(np.isfinite(fit.coefficients))
    assert np.allclose(fit.coefficients[[0, 1, 2]], np.linalg.pinv(sub) @ y, atol=1e-10)
    assert fit.coefficients[1] == pytest.approx(fit.coefficients[2])


def test_predict():
    rng = np.random.default_rng(8)
    xa = _design(30, 3, rng)
    xb = _design(12, 3, rng)
    y = xa @ np.array([0.3, 1.0, 0.0, 2.0]) + rng.standard_normal(30)
    fit = solve_weighted_lasso(xa, y, 3.0)
    expected = [sum(row[j] * fit.coefficients[j] for j in range(4)) for row in xb]
    assert np.allclose(predict(fit, xb), expected, atol=1e-12)
    zero = post_lasso_refit(xa, np.zeros(30), ())
    assert np.all(predict(zero, xb) == 0)
    ident = post_lasso_refit(xa[:, :2], xa[:, 1], (1,))
    assert np.allclose(predict(ident, xb[:, :2]), xb[:, 1], atol=1e-12)
    with pytest.raises(ShapeError):
        predict(fit, xb[:, :2])


def test_wide_design_with_rank_deficient_active_set():
    # CD alone drifts for thousands of sweeps here; the null-direction step certifies it
    rng = np.random.default_rng(2447)
    n, m = rng.integers(5, 201), rng.integers(1, 51)
    assert (n, m) == (8, 25)
    x = _design(n, m, rng)
    y = x[:, 1:3].sum(axis=1) + rng.standard_normal(n)
    lmax = 2 * np.abs((x[:, 1:] - x[:, 1:].mean(axis=0)).T @ (y - y.mean())).max()
    fit = solve_weighted_lasso(x, y, lmax * 10 ** rng.uniform(-2, 0))
    assert kkt_violation(fit, x, y) < 1e-9
    assert len(fit.support) <= n - 1
