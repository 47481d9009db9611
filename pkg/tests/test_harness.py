import json
import math

import numpy as np
import pytest

from mrtlmm.data import ModelSpec, ValidationError, build_design, save_csv
from mrtlmm.harness import (
    analyze,
    analyze_bundles,
    fccm_bias_demo,
    lrt_study,
    marginal_oracle,
    reduced_spec,
    replicate_seed,
    replication_table,
    run_replication,
)
from mrtlmm.simulate import (
    HEARTSTEPS_COEFS,
    GmParams,
    SimConfig,
    heartsteps_spec,
    simulate_heartsteps_like,
)


def test_replicate_seed_stable():
    assert replicate_seed(0, 0) == replicate_seed(0, 0)
    assert len({replicate_seed(s, r) for s in range(3) for r in range(50)}) == 150


def test_smoke_replication():
    rep = run_replication(SimConfig(gm=1, n=20, T=8, seed=1), reps=2)
    assert rep.n_reps == 2 and rep.n_failed == 0
    for name in ("(Intercept)", "x", "trt", "trt:x"):
        assert rep[name].coverage in (0.0, 0.5, 1.0)
    assert math.isnan(rep["Var(residual)"].coverage)
    lines = rep.to_markdown().splitlines()
    assert lines[0].startswith("| n | T | GM | beta0 bias")
    assert lines[2].startswith("| 20 | 8 | 1 |")
    assert len(rep.to_csv().splitlines()) == 1 + len(rep.params)
    json.dumps(rep.to_dict())


def test_replication_validation():
    with pytest.raises(ValidationError):
        run_replication(SimConfig(n=5, T=3), reps=1)
    with pytest.raises(ValidationError):
        run_replication(SimConfig(n=5, T=3), reps=3, level=1.0)


def test_worker_count_does_not_change_results():
    cfg = SimConfig(gm=2, n=15, T=6, seed=8)
    a = run_replication(cfg, reps=4, workers=1)
    b = run_replication(cfg, reps=4, workers=2)
    assert a.to_csv() == b.to_csv()
    for k in a.estimates:
        assert np.array_equal(a.estimates[k], b.estimates[k])


def test_fccm_smoke():
    demo = fccm_bias_demo(n=20, T=5, reps=2)
    lines = demo.to_markdown().splitlines()
    assert len(lines) == 4 and lines[2].split("|")[3].strip() == "1" and lines[3].split("|")[3].strip() == "3"
    b1, b3 = demo.bias_contrast()
    assert np.isfinite(b1) and np.isfinite(b3)
    assert replication_table([demo.gm1]) == demo.gm1.to_markdown()


def test_lrt_study_smoke():
    cfg = SimConfig(gm=1, n=30, T=10, seed=2, params=GmParams(sigma2_b2=2.0))
    st = lrt_study(cfg, reps=3)
    assert st.n_reps + st.n_excluded == 3
    assert np.all(st.p_mixture <= st.p_chi1) and st.rejection_rate == 1.0
    assert np.array_equal(lrt_study(cfg, reps=3, workers=2).p_mixture, st.p_mixture)


def test_lrt_study_needs_single_diagonal_component():
    from dataclasses import replace

    with pytest.raises(ValidationError):
        lrt_study(SimConfig(n=5, T=3), replace(heartsteps_spec(), random_trt=()), reps=2)
    with pytest.raises(ValidationError):
        lrt_study(SimConfig(n=5, T=3), replace(heartsteps_spec(), diagonal_G=False), reps=2)


# ---------------------------------------------------------------------------
# marginal oracle


def test_marginal_oracle_no_random_effect():
    r = marginal_oracle(sigma2_u=0.0, mc_n=200_000, seed=3)
    assert abs(r.slope_z(1.0)) < 4
    assert r.derived_slope == 1.0 and r.derived_intercept == 0.0


def test_marginal_oracle_first_slope_is_beta1():
    r = marginal_oracle(beta1=0.4, mc_n=200_000, seed=4)
    assert abs(r.first_slope - 0.4) < 4 * r.first_slope_se


def test_marginal_oracle_intercept_matches_derivation():
    # nonzero beta0 separates the two closed forms
    r = marginal_oracle(beta0=1.5, mc_n=400_000, seed=5)
    assert abs(r.marginal_intercept - r.derived_intercept) < 4 * r.marginal_intercept_se
    assert abs(r.marginal_intercept - r.printed_intercept) > 10 * r.marginal_intercept_se


def test_marginal_oracle_validation():
    with pytest.raises(ValidationError):
        marginal_oracle(mc_n=100)
    with pytest.raises(ValidationError):
        marginal_oracle(sigma2_u=-1.0, mc_n=10**4)
    with pytest.raises(ValidationError):
        marginal_oracle(sigma2_eps=0.0, mc_n=10**4)


# ---------------------------------------------------------------------------
# analyze


def test_analyze_writes_outputs(tmp_path):
    d = simulate_heartsteps_like(n=12, T=40, seed=3)
    save_csv(d, tmp_path / "d.csv")
    heartsteps_spec().to_json(tmp_path / "s.json")
    rep = analyze(tmp_path / "d.csv", tmp_path / "s.json", out_dir=tmp_path / "out")
    files = {p.name for p in (tmp_path / "out").iterdir()}
    assert files == {
        "coefficients_full.csv", "fit_full.json", "coefficients_reduced.csv", "fit_reduced.json",
        "lrt.json", "random_effects.csv", "summary.txt",
    }
    assert rep.predictions.b_hat.shape == (12, 2)
    assert "LRT" in rep.summary()
    assert set(json.loads((tmp_path / "out" / "lrt.json").read_text())) >= {"stat", "p_chi1", "p_mixture"}


def test_analyze_without_treatment_random_effect():
    spec = heartsteps_spec(random_treatment=False)
    assert reduced_spec(spec) is None
    d = simulate_heartsteps_like(n=8, T=30, seed=1)
    rep = analyze_bundles(build_design(d, spec), None)
    assert rep.lrt is None and rep.reduced is None and "reduced" not in rep.table()


def test_full_availability_plain_model():
    d = simulate_heartsteps_like(n=20, T=60, avail_rate=1.0, seed=6)
    spec = ModelSpec(
        fixed_main=("1", "day", "loc", "prior_steps"),
        fixed_trt=("1", "day", "loc"),
        random_main=("1",),
        random_trt=("1",),
        availability_interactions=False,
    )
    b = build_design(d, spec)
    assert b.p == 7 and not any(n.startswith("avail") for n in b.fixed_names)
    ungated = build_design(d, ModelSpec(**{**spec.to_dict(), "gate_treatment_by_availability": False}))
    # with every point available, gating is the identity
    assert all(np.array_equal(x, y) for x, y in zip(b.X, ungated.X))
    rep = analyze_bundles(b, build_design(d, reduced_spec(spec)))
    assert rep.full.converged and rep.lrt is not None


def _heartsteps_runs(spec, seeds):
    out = []
    for seed in seeds:
        d = simulate_heartsteps_like(n=37, T=204, seed=seed)
        out.append(analyze_bundles(build_design(d, spec), build_design(d, reduced_spec(spec))))
    return out


@pytest.fixture(scope="module")
def heartsteps_full():
    return _heartsteps_runs(heartsteps_spec(), range(100))


def test_heartsteps_treatment_effect_self_consistency(heartsteps_full):
    truth = HEARTSTEPS_COEFS["beta0"]
    hits = 0
    for rep in heartsteps_full:
        ci = next(c for c in rep.full_inference if c.name == "trt:avail")
        hits += ci.ci_low <= truth <= ci.ci_high
    assert hits >= 90


def test_heartsteps_lrt_size():
    # diagonal G: the reduced model drops a single variance, so the 50:50
    # mixture is the right null reference
    runs = _heartsteps_runs(heartsteps_spec(diagonal_G=True), range(100))
    keep = sum(r.lrt.p_mixture > 0.05 for r in runs)
    assert keep >= 90
