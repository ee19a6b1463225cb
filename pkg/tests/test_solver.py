"""Solver tests against dense oracles: annihilator projection, pseudo-inverse
OLS, and explicitly summed cluster sandwiches."""

import numpy as np
import pytest

from floodhedonics.solver import (
    DesignMatrix,
    EstimationError,
    Factor,
    absorbed_dof,
    cluster_robust_vcov,
    fit_design,
    ols,
    within_transform,
)


def _matrix(y, x, names, factors, cluster):
    return DesignMatrix(
        y=np.asarray(y, float),
        x=np.asarray(x, float),
        column_names=list(names),
        fe_factors=factors,
        cluster=cluster,
    )


def _dummies(codes, n_levels):
    d = np.zeros((len(codes), n_levels))
    d[np.arange(len(codes)), codes] = 1.0
    return d


def _random_matrix(rng, n=200, k=3, l1=8, l2=5, n_clusters=6):
    f1 = Factor.from_labels("f1", rng.integers(0, l1, n))
    f2 = Factor.from_labels("f2", rng.integers(0, l2, n))
    cl = Factor.from_labels("cl", rng.integers(0, n_clusters, n))
    x = rng.normal(size=(n, k))
    beta = rng.normal(size=k)
    y = (x @ beta + rng.normal(size=n)
         + rng.normal(size=l1)[f1.codes] + rng.normal(size=l2)[f2.codes])
    return _matrix(y, x, [f"x{i}" for i in range(k)], [f1, f2], cl)


def test_within_single_factor_single_group_centers():
    f = Factor.from_labels("g", np.zeros(10, dtype=int))
    cl = Factor.from_labels("c", np.arange(10) % 3)
    rng = np.random.default_rng(0)
    m = _matrix(rng.normal(size=10), rng.normal(size=(10, 2)), ["a", "b"], [f], cl)
    y_t, x_t, report = within_transform(m)
    assert report.iterations == 1 and report.converged
    assert abs(y_t.mean()) < 1e-12
    assert np.abs(x_t.mean(axis=0)).max() < 1e-12


def test_within_two_factors_matches_dense_annihilator():
    # 6-row toy with two crossed factors; oracle is M = I - D pinv(D) applied
    # to each column.
    f1 = Factor.from_labels("f1", [0, 0, 1, 1, 2, 2])
    f2 = Factor.from_labels("f2", [0, 1, 0, 1, 0, 1])
    cl = Factor.from_labels("cl", [0, 0, 0, 1, 1, 1])
    rng = np.random.default_rng(1)
    y = rng.normal(size=6)
    x = rng.normal(size=(6, 2))
    m = _matrix(y, x, ["a", "b"], [f1, f2], cl)
    y_t, x_t, report = within_transform(m, tol=1e-13)
    assert report.converged

    d = np.hstack([_dummies(f1.codes, 3), _dummies(f2.codes, 2)])
    annihilate = np.eye(6) - d @ np.linalg.pinv(d)
    assert np.allclose(y_t, annihilate @ y, atol=1e-10)
    assert np.allclose(x_t, annihilate @ x, atol=1e-10)


def test_within_absorbs_group_constant_column():
    f = Factor.from_labels("g", [0, 0, 1, 1])
    cl = Factor.from_labels("c", [0, 0, 1, 1])
    x = np.array([[1.0, 0.3], [1.0, -0.2], [2.0, 0.9], [2.0, 0.1]])
    m = _matrix(np.ones(4), x, ["const_in_group", "varies"], [f], cl)
    _, x_t, report = within_transform(m)
    assert report.absorbed == ["const_in_group"]
    assert np.abs(x_t[:, 0]).max() < 1e-12


def test_within_requires_factor_and_positive_tol():
    cl = Factor.from_labels("c", [0, 1])
    m = _matrix([1.0, 2.0], np.ones((2, 1)), ["x"], [], cl)
    with pytest.raises(EstimationError):
        within_transform(m)
    f = Factor.from_labels("g", [0, 1])
    m2 = _matrix([1.0, 2.0], np.ones((2, 1)), ["x"], [f], cl)
    with pytest.raises(EstimationError):
        within_transform(m2, tol=0.0)


def test_ols_exact_line():
    x = np.arange(1.0, 6.0)[:, None]
    y = 2.0 * x[:, 0]
    res = ols(y, x, ["x"])
    assert res.beta[0] == pytest.approx(2.0, abs=1e-12)
    assert np.abs(res.residuals).max() < 1e-12


def test_ols_drops_duplicated_column():
    rng = np.random.default_rng(2)
    x1 = rng.normal(size=40)
    x = np.column_stack([x1, x1])
    y = 3.0 * x1 + rng.normal(size=40)
    res = ols(y, x, ["x", "x_copy"])
    assert len(res.kept) == 1
    assert list(res.dropped.values()) == ["collinear"]


def test_ols_matches_pseudo_inverse_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 5))
    y = rng.normal(size=50)
    res = ols(y, x, [f"x{i}" for i in range(5)])
    beta_oracle = np.linalg.pinv(x) @ y
    assert np.allclose(res.beta, beta_oracle, rtol=1e-10, atol=1e-12)


def test_ols_zero_columns_error():
    with pytest.raises(EstimationError, match="zero kept columns"):
        ols(np.ones(4), np.zeros((4, 1)), ["x"], predropped={"x": "absorbed"})


def test_vcov_own_cluster_equals_hc_formula():
    rng = np.random.default_rng(4)
    n, k = 60, 3
    x = rng.normal(size=(n, k))
    e = rng.normal(size=n)
    cl = Factor.from_labels("obs", np.arange(n))
    vcov, correction, g = cluster_robust_vcov(x, e, cl, k_absorbed=0)
    assert g == n
    bread = np.linalg.inv(x.T @ x)
    meat = (x * e[:, None] ** 2).T @ x
    c = (n / (n - 1.0)) * ((n - 1.0) / (n - k))
    oracle = c * bread @ meat @ bread
    assert np.allclose(vcov, oracle, rtol=1e-10)


def test_vcov_three_cluster_toy_matches_summed_meat():
    rng = np.random.default_rng(5)
    n, k = 12, 2
    x = rng.normal(size=(n, k))
    e = rng.normal(size=n)
    codes = np.repeat([0, 1, 2], 4)
    cl = Factor.from_labels("cl", codes)
    vcov, correction, g = cluster_robust_vcov(x, e, cl, k_absorbed=0)
    meat = np.zeros((k, k))
    for c in range(3):
        s = x[codes == c].T @ e[codes == c]
        meat += np.outer(s, s)
    bread = np.linalg.inv(x.T @ x)
    c1 = (3 / 2.0) * ((n - 1.0) / (n - k))
    assert np.allclose(vcov, c1 * bread @ meat @ bread, rtol=1e-10)


def test_vcov_single_cluster_errors():
    x = np.ones((5, 1))
    cl = Factor.from_labels("cl", np.zeros(5, dtype=int))
    with pytest.raises(EstimationError, match="insufficient clusters"):
        cluster_robust_vcov(x, np.ones(5), cl, k_absorbed=0)


def test_absorbed_dof_two_factor_connectivity():
    # two disconnected blocks: rank of joint dummies is l1 + l2 - 2
    f1 = Factor.from_labels("f1", [0, 0, 1, 1])
    f2 = Factor.from_labels("f2", [0, 0, 1, 1])
    assert absorbed_dof([f1, f2]) == 2 + 2 - 2
    f2b = Factor.from_labels("f2", [0, 1, 0, 1])
    assert absorbed_dof([f1, f2b]) == 2 + 2 - 1
    assert absorbed_dof([f1]) == 2


def _dense_fit(matrix, k_x):
    """Dense dummy-expansion oracle: pinv OLS + explicit cluster sandwich."""
    d = np.hstack([_dummies(f.codes, f.n_levels) for f in matrix.fe_factors])
    full = np.hstack([matrix.x, d])
    u, s, vt = np.linalg.svd(full, full_matrices=False)
    rank = int((s > 1e-10 * s[0]).sum())
    pinv = (vt[:rank].T / s[:rank]) @ u[:, :rank].T
    beta = pinv @ matrix.y
    resid = matrix.y - full @ beta
    n = matrix.n
    g = int(np.unique(matrix.cluster.codes).size)
    bread = (vt[:rank].T / s[:rank] ** 2) @ vt[:rank]
    meat = np.zeros((full.shape[1], full.shape[1]))
    for c in np.unique(matrix.cluster.codes):
        sc = full[matrix.cluster.codes == c].T @ resid[matrix.cluster.codes == c]
        meat += np.outer(sc, sc)
    corr = (g / (g - 1.0)) * ((n - 1.0) / (n - rank))
    vcov = corr * bread @ meat @ bread
    return beta[:k_x], np.sqrt(np.diag(vcov)[:k_x]), resid


@pytest.mark.parametrize("seed", range(5))
def test_frisch_waugh_equivalence(seed):
    rng = np.random.default_rng(seed)
    m = _random_matrix(rng)
    result = fit_design(m, tol=1e-12)
    beta_d, se_d, resid_d = _dense_fit(m, m.x.shape[1])
    for j, name in enumerate(m.column_names):
        assert result.coefficients[name] == pytest.approx(beta_d[j], rel=1e-8)
        assert result.std_errors[name] == pytest.approx(se_d[j], rel=1e-6)
    assert np.allclose(result.residuals, resid_d, atol=1e-8)


def test_response_shift_leaves_slopes():
    rng = np.random.default_rng(11)
    m = _random_matrix(rng)
    r1 = fit_design(m, tol=1e-12)
    m2 = _matrix(m.y + 7.0, m.x, m.column_names, m.fe_factors, m.cluster)
    r2 = fit_design(m2, tol=1e-12)
    for name in m.column_names:
        assert abs(r1.coefficients[name] - r2.coefficients[name]) < 1e-10


def test_regressor_scaling():
    rng = np.random.default_rng(12)
    m = _random_matrix(rng)
    r1 = fit_design(m, tol=1e-12)
    x2 = m.x.copy()
    x2[:, 0] *= 4.0
    r2 = fit_design(_matrix(m.y, x2, m.column_names, m.fe_factors, m.cluster),
                    tol=1e-12)
    assert r2.coefficients["x0"] == pytest.approx(r1.coefficients["x0"] / 4.0, rel=1e-10)
    assert r2.std_errors["x0"] == pytest.approx(r1.std_errors["x0"] / 4.0, rel=1e-10)
    assert r2.coefficients["x1"] == pytest.approx(r1.coefficients["x1"], rel=1e-10)


def test_vcov_positive_semidefinite_and_se_consistent():
    rng = np.random.default_rng(13)
    m = _random_matrix(rng, n=400, k=4)
    result = fit_design(m)
    eig = np.linalg.eigvalsh(result.vcov)
    assert eig.min() > -1e-8 * eig.max()
    assert np.allclose(
        [result.std_errors[n] for n in result.vcov_names],
        np.sqrt(np.diag(result.vcov)),
    )
    assert np.allclose(result.vcov, result.vcov.T, rtol=1e-10)


def test_fit_deterministic():
    rng = np.random.default_rng(14)
    m = _random_matrix(rng)
    r1 = fit_design(m)
    r2 = fit_design(m)
    assert r1.to_json() == r2.to_json()
    assert np.array_equal(r1.residuals, r2.residuals)


def test_fit_reports_dropped_zero_column():
    rng = np.random.default_rng(15)
    m = _random_matrix(rng)
    x = np.column_stack([m.x, np.zeros(m.n)])
    m2 = _matrix(m.y, x, m.column_names + ["risk"], m.fe_factors, m.cluster)
    result = fit_design(m2, tol=1e-12)
    assert "risk" in result.dropped_columns
    assert "risk" not in result.coefficients


def test_r_squared_bounds():
    rng = np.random.default_rng(16)
    m = _random_matrix(rng, n=500)
    result = fit_design(m)
    assert 0.0 < result.r_squared <= 1.0
    assert 0.0 < result.r_squared_within <= 1.0
    assert result.r_squared >= result.r_squared_within - 1e-12
