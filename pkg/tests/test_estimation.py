from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.optimize import brentq
from scipy.stats import norm

from fpspatial.estimation import (
    EstimationResult,
    ModelSpec,
    ProbitError,
    RankDeficientError,
    build_design_matrix,
    compute_ape,
    demean_within,
    fit_ols,
    fit_probit,
    probit_hessian,
    probit_objective,
    probit_scores,
    write_estimation_csv,
)


def _probit_data(seed, n=200, k=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    theta = np.array([0.2, 0.8, -0.5])[:k]
    y = (X @ theta + rng.standard_normal(n) >= 0).astype(float)
    return X, y


def test_model_spec_columns():
    assert ModelSpec().column_names == ("const", "x")
    assert ModelSpec(spillover=True, target="spillover").column_names == ("const", "x", "spillover")
    assert ModelSpec(demean=True).column_names == ("x",)
    with pytest.raises(ValueError):
        ModelSpec(family="probit", demean=True)
    with pytest.raises(ValueError):
        ModelSpec(target="ape")
    with pytest.raises(ValueError):
        ModelSpec(target="spillover")


def test_design_matrix_examples():
    X, y = build_design_matrix(ModelSpec(), [1.0, 0.0, 1.0], [3.0, 1.0, 2.0])
    assert X.shape == (3, 2)
    assert_allclose(X[:, 0], 1.0)
    coords = np.array([[0.0, 0.0], [0.3, 0.0], [5.0, 5.0]])
    X, _ = build_design_matrix(ModelSpec(spillover=True), [1.0, 2.0, 3.0], [0, 0, 0], coords)
    assert_allclose(X[:, 2], [2.0, 1.0, 0.0])
    coords3 = np.array([[0.0, 0.0], [0.3, 0.0], [0.6, 0.0]])
    spec = ModelSpec(spillover=True)
    X, _ = build_design_matrix(spec, [1.0, 2.0, 4.0], [0, 0, 0], coords3)
    assert_allclose(X[:, 2], [2.0, 2.5, 2.0])
    X, _ = build_design_matrix(replace(spec, spillover_row_standardize=False), [1.0, 2.0, 4.0],
                               [0, 0, 0], coords3)
    assert_allclose(X[:, 2], [2.0, 5.0, 2.0])
    X, y = build_design_matrix(ModelSpec(demean=True), [1.0, 1.0, 0.0, 2.0], [1.0, 3.0, 0.0, 0.0],
                               clusters=[1, 1, 2, 2])
    assert_allclose(X[:2, 0], 0.0)
    assert_allclose(y, [-1.0, 1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        build_design_matrix(ModelSpec(spillover=True), [1.0], [1.0])


def test_ols_perfect_fit():
    x = np.arange(6.0)
    res = fit_ols(np.column_stack([np.ones(6), x]), 2 * x)
    assert_allclose(res.theta_hat, [0, 2], atol=1e-12)
    assert_allclose(res.scores, 0, atol=1e-12)


def test_ols_matches_normal_equations():
    X = np.array([[1, 0.5], [1, 1.5], [1, -2.0], [1, 3.0]])
    y = np.array([1.0, 2.0, -1.0, 4.5])
    res = fit_ols(X, y)
    assert_allclose(res.theta_hat, np.linalg.solve(X.T @ X, X.T @ y), rtol=1e-12)
    assert_allclose(res.hessian, X.T @ X / 4)
    assert_allclose(res.scores, -X * (y - X @ res.theta_hat)[:, None])


@given(st.integers(0, 10_000))
def test_ols_first_order_condition(seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
    res = fit_ols(X, rng.standard_normal(30) * 10)
    assert np.max(np.abs(res.mean_score)) <= 1e-8
    assert_allclose(res.hessian, res.hessian.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(res.hessian) > 0)


def test_ols_names_collinear_column():
    x = np.arange(5.0)
    X = np.column_stack([np.ones(5), x, 2 * x])
    with pytest.raises(RankDeficientError) as err:
        fit_ols(X, x, names=("const", "x", "spillover"))
    assert err.value.column in ("x", "spillover")
    with pytest.raises(ValueError):
        fit_ols(np.ones((2, 2)), np.ones(2))


def test_fixed_effects_equal_dummy_regression(rng):
    n, G = 60, 20
    clusters = np.repeat(np.arange(G), 3)
    x = rng.standard_normal(n)
    y = 1.5 * x + rng.standard_normal(G)[clusters] + rng.standard_normal(n)
    Xd, yd = build_design_matrix(ModelSpec(demean=True), x, y, clusters=clusters)
    fe = fit_ols(Xd, yd)
    dummies = (clusters[:, None] == np.arange(G)).astype(float)
    full = np.linalg.lstsq(np.column_stack([x, dummies]), y, rcond=None)[0]
    assert abs(fe.theta_hat[0] - full[0]) <= 1e-8


def test_probit_symmetric_data_gives_zero_slope():
    x = np.array([-2.0, -1.0, 1.0, 2.0, -0.5, 0.5])
    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    # mirror: flipping x -> -x maps the data set to itself
    X = np.column_stack([np.ones(12), np.r_[x, -x]])
    res = fit_probit(X, np.r_[y, y])
    assert abs(res.theta_hat[1]) <= 1e-8


def test_probit_intercept_only():
    y = np.r_[np.ones(3), np.zeros(7)]
    res = fit_probit(np.ones((10, 1)), y)
    root = brentq(lambda t: norm.cdf(t) - 0.3, -5, 5, xtol=1e-14)
    assert res.theta_hat[0] == pytest.approx(root, abs=1e-9)


def test_probit_score_matches_finite_difference():
    X, y = _probit_data(1)
    res = fit_probit(X, y)
    theta = res.theta_hat + 0.05
    analytic = probit_scores(theta, X, y).mean(axis=0)
    d = 1e-5
    fd = np.array([(probit_objective(theta + d * e, X, y) - probit_objective(theta - d * e, X, y))
                   / (2 * d) for e in np.eye(3)])
    assert np.max(np.abs(analytic - fd) / np.abs(fd)) <= 1e-6


@given(st.integers(0, 1000))
def test_probit_hessian_matches_score_jacobian(seed):
    X, y = _probit_data(seed, n=60)
    theta = np.array([0.1, 0.3, -0.2])
    d = 1e-6
    jac = np.column_stack([(probit_scores(theta + d * e, X, y).mean(0)
                            - probit_scores(theta - d * e, X, y).mean(0)) / (2 * d)
                           for e in np.eye(3)])
    H = probit_hessian(theta, X, y)
    assert np.max(np.abs(H - jac)) <= 1e-5 * np.max(np.abs(H))


def test_probit_fit_converges_with_zero_score():
    X, y = _probit_data(2)
    res = fit_probit(X, y)
    assert res.converged and res.iterations < 20
    assert np.max(np.abs(res.mean_score)) <= 1e-8
    assert np.all(np.linalg.eigvalsh(res.hessian) > 0)


def test_probit_extreme_index_is_stable():
    X, y = _probit_data(3)
    s = probit_scores(np.array([0.0, 25.0, 0.0]), X, y)
    assert np.all(np.isfinite(s))


def test_probit_separation_and_constant_outcome():
    x = np.linspace(-1, 1, 20)
    X = np.column_stack([np.ones(20), x])
    with pytest.raises(ProbitError):
        fit_probit(X, (x > 0).astype(float))
    with pytest.raises(ProbitError):
        fit_probit(X, np.ones(20))


def test_ape_zero_slope():
    X, y = _probit_data(4)
    res = fit_probit(X, y)
    flat = replace(res, theta_hat=np.array([res.theta_hat[0], 0.0, res.theta_hat[2]]))
    ape = compute_ape(flat, X, 1)
    assert ape.gamma_hat[0] == 0
    assert np.all(ape.f_rows == 0)


def test_ape_jacobian_matches_finite_difference():
    X, y = _probit_data(5)
    res = fit_probit(X, y)
    ape = compute_ape(res, X, 1)
    assert ape.gamma_hat[0] == pytest.approx(ape.f_rows.mean(), abs=1e-12)
    d = 1e-5
    fd = []
    for e in np.eye(3):
        up = compute_ape(replace(res, theta_hat=res.theta_hat + d * e), X, 1).gamma_hat[0]
        dn = compute_ape(replace(res, theta_hat=res.theta_hat - d * e), X, 1).gamma_hat[0]
        fd.append((up - dn) / (2 * d))
    fd = np.array(fd)
    assert np.max(np.abs(ape.F_hat[0] - fd) / np.abs(fd)) <= 1e-6


def test_ape_single_unit():
    X = np.array([[1.0, 0.7]])
    res = EstimationResult(np.array([0.1, 0.4]), np.zeros((1, 2)), np.eye(2))
    ape = compute_ape(res, X, 1)
    assert ape.gamma_hat[0] == pytest.approx(norm.pdf(0.1 + 0.28) * 0.4)


def test_demean_within_vector_and_matrix():
    g = [0, 0, 1]
    assert_allclose(demean_within([1.0, 3.0, 5.0], g), [-1, 1, 0])
    assert_allclose(demean_within(np.array([[1.0], [3.0], [5.0]]), g)[:, 0], [-1, 1, 0])


def test_estimation_csv(tmp_path):
    res = fit_ols(np.column_stack([np.ones(4), [0, 1, 2, 4.0]]), [1, 2, 2, 5.0], ("const", "x"))
    write_estimation_csv(res, tmp_path / "e.csv", tmp_path / "s.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "name,theta_hat,converged,iterations"
    assert float(lines[2].split(",")[1]) == res.theta_hat[1]
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5
