import json

import numpy as np
import pytest
from scipy import stats

from conftest import one_way_bundle, random_bundle
from oracles import one_way_anova
from mrtlmm.data import DesignBundle, build_design
from mrtlmm.lmm import (
    DEVIANCE_PENALTY,
    FitOptions,
    NumericalError,
    RankDeficientError,
    VarianceParams,
    deviance_at,
    direct_deviance,
    fit,
    gls_fixed_effects,
    lambda_to_theta,
    marginal_covariance,
    n_theta,
    predict_random_effects,
    profiled_deviance,
    theta_diag_index,
    theta_to_lambda,
    write_trace_csv,
)
from mrtlmm.simulate import SimConfig, gm_model_spec, simulate_gm


def _profiled_beta_sigma(theta, bundle):
    """beta-hat and ML sigma2-hat at theta from explicit dense GLS."""
    lam = theta_to_lambda(theta, bundle.q, bundle.diagonal_G)
    vp = VarianceParams(lam, 1.0)
    beta, cov = gls_fixed_effects(bundle, vp)
    r2 = 0.0
    for x, z, y in zip(bundle.X, bundle.Z, bundle.y):
        r = y - x @ beta
        r2 += r @ np.linalg.solve(marginal_covariance(z, vp), r)
    return beta, r2 / bundle.n_obs


# ---------------------------------------------------------------------------
# marginal covariance


def test_marginal_covariance_examples():
    Z = np.ones((2, 1))
    vp = VarianceParams(np.zeros((1, 1)), 2.0)
    assert np.array_equal(marginal_covariance(Z, vp), 2.0 * np.eye(2))
    vp = VarianceParams.from_G(np.array([[3.0]]), 0.5)
    assert np.allclose(marginal_covariance(Z, vp), [[3.5, 3.0], [3.0, 3.5]])
    vp = VarianceParams.from_G(np.diag([4.0, 0.25]), 1.0)
    V = marginal_covariance(np.array([[1.0, 0.5]]), vp)
    z = np.array([1.0, 0.5])
    assert V[0, 0] == pytest.approx(z @ np.diag([4.0, 0.25]) @ z + 1.0)
    assert V[0, 0] == pytest.approx(5.0625)
    with pytest.raises(ValueError):
        VarianceParams(np.eye(1), 0.0)


def test_variance_params_G_exact():
    lam = np.array([[1.5, 0.0], [-0.4, 0.3]])
    vp = VarianceParams(lam, 2.0)
    assert np.array_equal(vp.G, 2.0 * lam @ lam.T)
    back = VarianceParams.from_G(vp.G, 2.0)
    assert np.allclose(back.G, vp.G)


def test_theta_roundtrip():
    for q, diag in [(1, False), (2, False), (3, False), (3, True)]:
        k = n_theta(q, diag)
        th = np.arange(1.0, k + 1)
        lam = theta_to_lambda(th, q, diag)
        assert np.allclose(np.tril(lam), lam)
        assert np.array_equal(lambda_to_theta(lam, diag), th)
        assert np.all(th[theta_diag_index(q, diag)] == np.diag(lam))


# ---------------------------------------------------------------------------
# deviance


def test_profiled_matches_direct_deviance(rng):
    for _ in range(5):
        b = random_bundle(rng, n=5, T=4, p=2, q=2)
        for _ in range(10):
            th = rng.normal(size=3)
            th[[0, 2]] = np.abs(th[[0, 2]])
            beta, s2 = _profiled_beta_sigma(th, b)
            vp = VarianceParams(theta_to_lambda(th, 2, False), s2)
            d = direct_deviance(b, beta, vp)
            assert profiled_deviance(th, b, "ML") == pytest.approx(d, rel=1e-10)


def test_profiled_values_are_stationary(rng):
    b = random_bundle(rng, n=6, T=4, p=2, q=1)
    th = np.array([0.7])
    beta, s2 = _profiled_beta_sigma(th, b)
    lam = theta_to_lambda(th, 1, False)
    d0 = direct_deviance(b, beta, VarianceParams(lam, s2))
    for db, ds in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3)]:
        d = direct_deviance(b, beta + db, VarianceParams(lam, s2 * (1 + ds)))
        assert d > d0


def test_reml_deviance_matches_dense_formula(rng):
    b = random_bundle(rng, n=5, T=4, p=2, q=2, diagonal=True)
    th = np.array([0.8, 1.3])
    s2 = 1.7
    vp = VarianceParams(theta_to_lambda(th, 2, True), s2)
    beta, cov = gls_fixed_effects(b, vp)
    XtVX = np.linalg.inv(cov)
    direct = direct_deviance(b, beta, vp) + np.linalg.slogdet(XtVX)[1] - b.p * np.log(2 * np.pi)
    assert deviance_at(th, s2, b, "REML") == pytest.approx(direct, rel=1e-10)


def test_single_observation_scalar_formula():
    b = DesignBundle((np.ones((1, 1)),), (np.ones((1, 1)),), (np.array([0.7]),), ("(Intercept)",), ("(Intercept)",))
    for th, s2 in [(0.0, 1.0), (1.3, 0.4), (2.0, 2.5)]:
        v = s2 * (1 + th**2)
        assert deviance_at(np.array([th]), s2, b, "ML") == pytest.approx(np.log(2 * np.pi * v))
        vp = VarianceParams(np.array([[th]]), s2)
        assert direct_deviance(b, np.array([0.2]), vp) == pytest.approx(np.log(2 * np.pi * v) + 0.25 / v)


def test_exact_fit_penalty_and_monotone_path():
    X = np.column_stack([np.ones(4), np.arange(4.0)])
    b = DesignBundle((X[:2], X[2:]), (np.ones((2, 1)),) * 2, (X[:2, 1] * 2 + 1, X[2:, 1] * 2 + 1), ("a", "b"), ("a",))
    assert profiled_deviance(np.array([0.0]), b, "ML") == DEVIANCE_PENALTY
    noisy = b.with_outcomes([b.y[0] + [1e-3, -1e-3], b.y[1] + [-1e-3, 1e-3]])
    scales = [1e-1, 1e-2, 1e-3, 1e-4]
    devs = [profiled_deviance(np.array([0.0]), noisy.with_outcomes([s * (y - x @ [1, 2]) + x @ [1, 2] for x, y in zip(noisy.X, noisy.y)]), "ML") for s in scales]
    assert all(d1 > d2 for d1, d2 in zip(devs, devs[1:]))


def test_direct_deviance_invariant_to_order(rng):
    b = random_bundle(rng, n=6, T=3)
    vp = VarianceParams.from_G(np.array([[1.0, 0.2], [0.2, 0.5]]), 0.7)
    beta = np.array([0.3, -0.1])
    assert direct_deviance(b, beta, vp) == pytest.approx(direct_deviance(b.subset([5, 3, 1, 0, 2, 4]), beta, vp), rel=1e-13)


# ---------------------------------------------------------------------------
# GLS


def test_gls_zero_lambda_is_ols(rng):
    b = random_bundle(rng, n=8, T=4, p=3, q=2)
    beta, cov = gls_fixed_effects(b, VarianceParams(np.zeros((2, 2)), 1.3))
    ols, *_ = np.linalg.lstsq(b.X_all, b.y_all, rcond=None)
    assert np.allclose(beta, ols, rtol=1e-12)
    assert np.allclose(cov, 1.3 * np.linalg.inv(b.X_all.T @ b.X_all))


def test_gls_noise_free_recovery(rng):
    b = random_bundle(rng, n=6, T=5, p=3, q=2)
    true = np.array([1.5, -2.0, 0.25])
    exact = b.with_outcomes([x @ true for x in b.X])
    beta, _ = gls_fixed_effects(exact, VarianceParams.from_G(np.diag([2.0, 0.5]), 1.0))
    assert np.allclose(beta, true, atol=1e-12)


def test_gls_balanced_grand_mean(rng):
    y = rng.normal(size=(5, 4)) + rng.normal(size=(5, 1)) * 2
    b = one_way_bundle(y)
    vp = VarianceParams.from_G(np.array([[2.3]]), 0.8)
    beta, cov = gls_fixed_effects(b, vp)
    assert beta[0] == pytest.approx(y.mean(), rel=1e-12)
    V = marginal_covariance(np.ones((4, 1)), vp)
    explicit = 1.0 / (5 * np.ones(4) @ np.linalg.inv(V) @ np.ones(4))
    assert cov[0, 0] == pytest.approx(explicit, rel=1e-12)


def test_rank_deficient_names_columns():
    X = np.column_stack([np.ones(3), np.arange(3.0), 2 * np.arange(3.0)])
    b = DesignBundle((X, X), (np.ones((3, 1)),) * 2, (np.arange(3.0), np.arange(3.0) ** 2), ("a", "b", "c"), ("a",))
    with pytest.raises(RankDeficientError, match="b, c"):
        gls_fixed_effects(b, VarianceParams(np.eye(1), 1.0))
    with pytest.raises(RankDeficientError):
        fit(b)


def test_badly_scaled_columns_not_rank_deficient(rng):
    X = np.column_stack([np.ones(6), np.geomspace(1, 1e9, 6)])
    b = DesignBundle((X[:3], X[3:]), (np.ones((3, 1)),) * 2, (rng.normal(size=3), rng.normal(size=3)), ("a", "b"), ("a",))
    gls_fixed_effects(b, VarianceParams(np.eye(1), 1.0))


# ---------------------------------------------------------------------------
# fitting


@pytest.mark.parametrize("objective", ["ML", "REML"])
def test_fit_matches_anova(rng, objective):
    y = rng.normal(size=(6, 4)) + rng.normal(size=(6, 1)) * 1.5
    f = fit(one_way_bundle(y), objective)
    s2b, s2e = one_way_anova(y, objective)
    vc = f.variance_components()
    assert f.converged
    assert vc["Var((Intercept))"] == pytest.approx(s2b, rel=1e-6)
    assert vc["Var(residual)"] == pytest.approx(s2e, rel=1e-6)
    assert f.beta[0] == pytest.approx(y.mean(), rel=1e-10)


def test_fit_boundary_clipped(rng):
    y = rng.normal(size=(5, 3))
    y -= y.mean(axis=1, keepdims=True) - y.mean()  # equal group means
    for obj in ("ML", "REML"):
        f = fit(one_way_bundle(y), obj)
        s2b, s2e = one_way_anova(y, obj)
        assert s2b == 0.0
        assert f.variance_components()["Var((Intercept))"] == 0.0
        assert f.sigma2_eps == pytest.approx(s2e, rel=1e-8)


def test_reml_at_least_ml(rng):
    for _ in range(5):
        y = rng.normal(size=(4, 3)) + rng.normal(size=(4, 1))
        b = one_way_bundle(y)
        ml, reml = fit(b, "ML"), fit(b, "REML")
        assert reml.G_hat[0, 0] >= ml.G_hat[0, 0]


def test_degenerate_one_way_example():
    # two individuals with no within-individual variation: the moment
    # formulas give sigma2_b = 1 (ML) and 2 (REML) with sigma2_eps = 0, but
    # the likelihood itself is unbounded as sigma2_eps -> 0
    y = np.array([[1.0, 1.0], [3.0, 3.0]])
    assert one_way_anova(y, "ML") == (1.0, 0.0)
    assert one_way_anova(y, "REML") == (2.0, 0.0)
    b = one_way_bundle(y)
    devs = [profiled_deviance(np.array([t]), b, "ML") for t in (1.0, 10.0, 100.0, 1000.0)]
    assert all(d1 > d2 for d1, d2 in zip(devs, devs[1:]))
    # along the profile path sigma2_b -> 1/2 (ML) and 2/3 (REML)
    th = 1e3
    r2 = 4 / (1 + 2 * th**2)
    assert th**2 * r2 / 4 == pytest.approx(0.5, rel=1e-5)
    for obj in ("ML", "REML"):
        with pytest.raises(NumericalError, match="collapsed"):
            fit(b, obj)


def test_null_variance_goes_to_boundary():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(200, 10))
    f = fit(one_way_bundle(y), "REML")
    assert f.G_hat[0, 0] < 0.01


def test_fit_errors():
    b = DesignBundle((np.ones((1, 1)),), (np.ones((1, 1)),), (np.zeros(1),), ("a",), ("a",))
    with pytest.raises(ValueError, match="more observations"):
        fit(b)
    with pytest.raises(ValueError):
        fit(b, "XL")


def test_fitresult_invariants_and_json(rng, tmp_path):
    b = random_bundle(rng, n=10, T=5, p=2, q=2)
    f = fit(b, "REML", FitOptions(trace=True))
    assert np.array_equal(f.G_hat, f.variance.sigma2_eps * f.variance.lam @ f.variance.lam.T)
    assert np.allclose(f.beta_cov, f.beta_cov.T)
    assert np.all(np.linalg.eigvalsh(f.beta_cov) >= 0)
    d = json.loads(f.to_json())
    assert d["objective"] == "REML" and "converged" in d["convergence"]
    assert set(d["variance_components"]) == set(f.variance_components())
    write_trace_csv(f, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert len(lines) - 1 == len(f.optimizer_trace) and lines[0].startswith("start,eval,deviance")


def test_scale_equivariance():
    b = build_design(simulate_gm(SimConfig(gm=1, n=40, T=10, seed=4)), gm_model_spec(1))
    c = 3.0
    f1 = fit(b)
    f2 = fit(b.with_outcomes([c * y for y in b.y]))
    assert np.allclose(f2.beta, c * f1.beta, rtol=1e-6)
    assert f2.sigma2_eps == pytest.approx(c**2 * f1.sigma2_eps, rel=1e-6)
    assert np.allclose(f2.G_hat, c**2 * f1.G_hat, rtol=1e-5)
    assert np.allclose(f2.theta, f1.theta, rtol=1e-5, atol=1e-8)


def test_individual_exchangeability():
    b = build_design(simulate_gm(SimConfig(gm=1, n=40, T=10, seed=8)), gm_model_spec(1))
    order = np.random.default_rng(1).permutation(b.n)
    f1, f2 = fit(b), fit(b.subset(order))
    assert np.allclose(f1.beta, f2.beta, rtol=1e-7)
    assert np.allclose(f1.G_hat, f2.G_hat, rtol=1e-6)
    assert f1.loglik == pytest.approx(f2.loglik, rel=1e-12)
    p1 = predict_random_effects(b, f1)
    p2 = predict_random_effects(b.subset(order), f2)
    assert np.allclose(p1.b_hat[order], p2.b_hat, rtol=1e-5, atol=1e-8)
    assert p2.ids == tuple(b.ids[i] for i in order)


def test_fit_reproducible_bitwise():
    b = build_design(simulate_gm(SimConfig(gm=2, n=40, T=10, seed=2)), gm_model_spec(2))
    f1, f2 = fit(b), fit(b)
    assert f1.to_json() == f2.to_json()


def test_explosive_covariate_paths_fit():
    # GM2 random slopes occasionally make the covariate recursion explosive
    cfg = SimConfig(gm=2, n=100, T=30, seed=3)
    b = build_design(simulate_gm(cfg), gm_model_spec(2))
    assert max(np.abs(x[:, 1]).max() for x in b.X) > 1e6
    th = np.array([2.0, 0.5, 1.0, 0.5])
    d = profiled_deviance(th, b)
    assert abs(profiled_deviance(th * (1 + 1e-10), b) - d) < 1e-5
    f = fit(b)
    assert f.converged and abs(f.beta[3] - 0.3) < 0.2


def test_theta_fixed():
    b = build_design(simulate_gm(SimConfig(gm=1, n=20, T=5, seed=1)), gm_model_spec(1, diagonal_G=True))
    f = fit(b, "REML", FitOptions(theta_fixed=[0.0, 0.0]))
    ols, *_ = np.linalg.lstsq(b.X_all, b.y_all, rcond=None)
    assert np.allclose(f.beta, ols) and f.n_evals == 1 and f.theta_fixed
    with pytest.raises(ValueError):
        fit(b, "REML", FitOptions(theta_fixed=[0.0]))


# ---------------------------------------------------------------------------
# random-effect prediction


def test_predictions_zero_cases(rng):
    b = random_bundle(rng, n=5, T=4)
    f = fit(b, "REML", FitOptions(theta_fixed=[0.0, 0.0, 0.0]))
    assert np.all(predict_random_effects(b, f).b_hat == 0)
    f = fit(b)
    exact = b.with_outcomes([x @ f.beta for x in b.X])
    assert np.allclose(predict_random_effects(exact, f).b_hat, 0, atol=1e-12)


def test_prediction_matches_dense_formula(rng):
    b = random_bundle(rng, n=6, T=4, p=2, q=2)
    f = fit(b)
    pr = predict_random_effects(b, f)
    G = f.G_hat
    for i, (x, z, y) in enumerate(zip(b.X, b.Z, b.y)):
        V = marginal_covariance(z, f.variance)
        Vi = np.linalg.inv(V)
        assert np.allclose(pr.b_hat[i], G @ z.T @ Vi @ (y - x @ f.beta), atol=1e-10)
        cc = G - G @ z.T @ Vi @ z @ G
        assert np.allclose(pr.cond_cov[i], cc, atol=1e-10)
        assert np.allclose(pr.cond_cov[i], pr.cond_cov[i].T)
        assert np.all(np.linalg.eigvalsh(pr.cond_cov[i]) >= -1e-12)


def test_balanced_shrinkage_factor(rng):
    y = rng.normal(size=(6, 5)) + rng.normal(size=(6, 1)) * 2
    b = one_way_bundle(y)
    f = fit(b)
    s2b, s2e, T = f.G_hat[0, 0], f.sigma2_eps, 5
    k = T * s2b / (T * s2b + s2e)
    pr = predict_random_effects(b, f)
    assert np.allclose(pr.b_hat[:, 0], k * (y.mean(axis=1) - f.beta[0]), rtol=1e-10)


def test_shrinkage_monotone_in_residual_variance(rng):
    y = rng.normal(size=(8, 4)) + rng.normal(size=(8, 1))
    b = one_way_bundle(y)
    f = fit(b)
    norms = []
    for s2 in np.linspace(0.1, 5, 20):
        # hold G and beta fixed; only sigma2_eps changes
        lam = np.sqrt(f.G_hat / s2)
        g = type(f)(**{**f.__dict__, "variance": VarianceParams(lam, s2), "G_hat": f.G_hat})
        norms.append(np.linalg.norm(predict_random_effects(b, g).b_hat, axis=1))
    norms = np.array(norms)
    assert np.all(np.diff(norms, axis=0) <= 1e-12)
