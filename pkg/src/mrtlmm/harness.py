"""Replication studies, the induced-marginal oracle and the analysis workflow."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DesignBundle, ModelSpec, ValidationError, build_design, load_csv
from .inference import (
    CoefInference,
    SatterthwaiteWarning,
    VarCompTest,
    format_inference_table,
    inference_to_csv,
    lrt_variance,
    satterthwaite_ci,
)
from .lmm import FitOptions, FitResult, NumericalError, RandomEffectsPrediction, fit, predict_random_effects
from .simulate import SimConfig, gm_model_spec, gm_truth, simulate_gm

log = logging.getLogger(__name__)

#: design column names of the treatment-effect coefficients in the GM models
TREATMENT_TERMS = ("trt", "trt:x")
_TABLE_LABELS = {"trt": "beta0", "trt:x": "beta1"}


def replicate_seed(master_seed: int, rep: int) -> int:
    """Seed of replicate ``rep``; a hash of (master seed, replicate index)."""
    return int(np.random.SeedSequence([int(master_seed), int(rep)]).generate_state(1, np.uint64)[0])


def _mean(x: Sequence[float]) -> float:
    return math.fsum(x) / len(x) if len(x) else math.nan


def _sd(x: Sequence[float]) -> float:
    # fsum is exactly rounded, so aggregates do not depend on evaluation order
    if len(x) < 2:
        return math.nan
    m = _mean(x)
    return math.sqrt(math.fsum((v - m) ** 2 for v in x) / (len(x) - 1))


# ---------------------------------------------------------------------------
# replication


@dataclass(frozen=True)
class ReplicateOutcome:
    rep: int
    seed: int
    status: str  # "ok" | "nonconverged" | "failed"
    estimates: dict = field(default_factory=dict)
    ci: dict = field(default_factory=dict)  # name -> (low, high)
    df_fallback: bool = False
    message: str = ""


def _one_replicate(job: tuple) -> ReplicateOutcome:
    cfg, spec, level, objective, opts, rep = job
    seed = replicate_seed(cfg.seed, rep)
    try:
        bundle = build_design(simulate_gm(replace(cfg, seed=seed)), spec)
        res = fit(bundle, objective, opts)
        if not res.converged:
            return ReplicateOutcome(rep, seed, "nonconverged")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SatterthwaiteWarning)
            rows = satterthwaite_ci(res, bundle, level)
        est = {r.name: r.estimate for r in rows}
        est.update(res.variance_components())
        ci = {r.name: (r.ci_low, r.ci_high) for r in rows}
        fallback = any(issubclass(w.category, SatterthwaiteWarning) for w in caught)
        return ReplicateOutcome(rep, seed, "ok", est, ci, fallback)
    except (NumericalError, np.linalg.LinAlgError, ValidationError) as exc:
        return ReplicateOutcome(rep, seed, "failed", message=str(exc))


def _map(jobs: list, workers: int, func=_one_replicate) -> list:
    if workers <= 1 or len(jobs) < 2:
        return [func(j) for j in jobs]
    chunk = max(1, len(jobs) // (8 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, jobs, chunksize=chunk))


@dataclass(frozen=True)
class ParamSummary:
    name: str
    truth: float
    bias: float
    sd: float
    coverage: float  # nan for variance components
    n_reps: int


@dataclass
class ReplicationReport:
    cfg: SimConfig
    spec: ModelSpec
    level: float
    objective: str
    n_requested: int
    n_nonconverged: int
    n_failed: int
    n_df_fallback: int
    params: list[ParamSummary]
    estimates: dict[str, np.ndarray]  # per-replicate estimates of used replicates
    outcomes: list[ReplicateOutcome] = field(repr=False, default_factory=list)

    @property
    def n_reps(self) -> int:
        return self.n_requested - self.n_nonconverged - self.n_failed

    def __getitem__(self, name: str) -> ParamSummary:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gm", "n", "T", "parameter", "truth", "bias", "sd", "coverage", "n_reps", "n_nonconverged", "n_failed"])
        for p in self.params:
            w.writerow(
                [self.cfg.gm, self.cfg.n, self.cfg.T, p.name, p.truth, p.bias, p.sd, p.coverage, p.n_reps,
                 self.n_nonconverged, self.n_failed]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_markdown(self) -> str:
        return replication_table([self])

    def to_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "spec": self.spec.to_dict(),
            "level": self.level,
            "objective": self.objective,
            "n_requested": self.n_requested,
            "n_reps": self.n_reps,
            "n_nonconverged": self.n_nonconverged,
            "n_failed": self.n_failed,
            "n_df_fallback": self.n_df_fallback,
            "params": [asdict(p) for p in self.params],
        }


def replication_table(reports: Sequence[ReplicationReport], digits: int = 3) -> str:
    """Markdown table with one row per setting: bias, sd and cp of the treatment effects."""
    names = [t for t in TREATMENT_TERMS if all(any(p.name == t for p in r.params) for r in reports)]
    head = ["n", "T", "GM"]
    for t in names:
        lab = _TABLE_LABELS[t]
        head += [f"{lab} bias", f"{lab} sd", f"{lab} cp"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    f = f"{{:.{digits}f}}"
    for r in reports:
        row = [str(r.cfg.n), str(r.cfg.T), str(r.cfg.gm)]
        for t in names:
            p = r[t]
            row += [f.format(p.bias), f.format(p.sd), f.format(p.coverage)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def run_replication(
    cfg: SimConfig,
    spec: ModelSpec | None = None,
    reps: int = 1000,
    level: float = 0.95,
    objective: str = "REML",
    workers: int = 1,
    fit_opts: FitOptions | None = None,
) -> ReplicationReport:
    """Simulate, fit and build CIs ``reps`` times; aggregate bias, sd and coverage.

    Replicate ``r`` uses the dataset seed ``replicate_seed(cfg.seed, r)``, so
    every number depends only on (cfg, spec, reps, level, objective, options)
    and not on ``workers``.  Non-converged and failed replicates are excluded
    and counted.
    """
    if reps < 2:
        raise ValidationError("reps must be at least 2")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    spec = spec or gm_model_spec(cfg.gm)
    opts = fit_opts or FitOptions()
    jobs = [(cfg, spec, level, objective, opts, r) for r in range(reps)]
    outcomes = _map(jobs, workers)
    ok = [o for o in outcomes if o.status == "ok"]
    truth = gm_truth(cfg)
    params = []
    estimates = {}
    names = list(ok[0].estimates) if ok else []
    for name in names:
        vals = [o.estimates[name] for o in ok]
        estimates[name] = np.array(vals)
        if name not in truth:
            continue
        tv = truth[name]
        if name in ok[0].ci:
            cov = _mean([1.0 if o.ci[name][0] <= tv <= o.ci[name][1] else 0.0 for o in ok])
        else:
            cov = math.nan
        params.append(ParamSummary(name, tv, _mean(vals) - tv, _sd(vals), cov, len(ok)))
    n_nc = sum(o.status == "nonconverged" for o in outcomes)
    n_fail = sum(o.status == "failed" for o in outcomes)
    if n_nc or n_fail:
        log.warning("%d non-converged and %d failed replicates excluded", n_nc, n_fail)
    return ReplicationReport(
        cfg, spec, level, objective.upper(), reps, n_nc, n_fail,
        sum(o.df_fallback for o in ok), params, estimates, outcomes,
    )


# ---------------------------------------------------------------------------
# LRT size and power


@dataclass
class LrtStudy:
    cfg: SimConfig
    alpha: float
    objective: str
    n_requested: int
    n_excluded: int  # non-converged or failed fits
    p_mixture: np.ndarray  # one per used replicate
    p_chi1: np.ndarray

    @property
    def n_reps(self) -> int:
        return len(self.p_mixture)

    @property
    def rejection_rate(self) -> float:
        return _mean([1.0 if p < self.alpha else 0.0 for p in self.p_mixture])

    @property
    def rejection_rate_chi1(self) -> float:
        return _mean([1.0 if p < self.alpha else 0.0 for p in self.p_chi1])


def _one_lrt(job: tuple) -> tuple[float, float] | None:
    cfg, full_spec, red_spec, objective, opts, rep = job
    data = simulate_gm(replace(cfg, seed=replicate_seed(cfg.seed, rep)))
    try:
        full = fit(build_design(data, full_spec), objective, opts)
        red = fit(build_design(data, red_spec), objective, opts)
    except (NumericalError, np.linalg.LinAlgError, ValidationError):
        return None
    if not (full.converged and red.converged):
        return None
    t = lrt_variance(full, red)
    return t.p_mixture, t.p_chi1


def lrt_study(
    cfg: SimConfig,
    spec: ModelSpec | None = None,
    reps: int = 1000,
    alpha: float = 0.05,
    objective: str = "REML",
    workers: int = 1,
    fit_opts: FitOptions | None = None,
) -> LrtStudy:
    """Rejection rate of the LRT for the treatment random effect over ``reps``
    simulated datasets (size when its variance is 0, power otherwise).

    ``spec`` (default: the GM model with diagonal G) must have exactly one
    treatment random effect and diagonal G, so that the reduced model drops a
    single variance and the 50:50 chi-square mixture is the null reference.
    """
    if reps < 2:
        raise ValidationError("reps must be at least 2")
    spec = spec or gm_model_spec(cfg.gm, diagonal_G=True)
    red = reduced_spec(spec)
    if red is None or len(spec.random_trt) != 1 or not spec.diagonal_G:
        raise ValidationError("the LRT study needs one treatment random effect and diagonal G")
    jobs = [(cfg, spec, red, objective, fit_opts or FitOptions(), r) for r in range(reps)]
    res = [r for r in _map(jobs, workers, _one_lrt) if r is not None]
    return LrtStudy(
        cfg, alpha, objective.upper(), reps, reps - len(res),
        np.array([r[0] for r in res]), np.array([r[1] for r in res]),
    )


# ---------------------------------------------------------------------------
# GM1 vs GM3


@dataclass
class FccmDemo:
    gm1: ReplicationReport
    gm3: ReplicationReport

    def bias_contrast(self, name: str = "trt:x") -> tuple[float, float]:
        return self.gm1[name].bias, self.gm3[name].bias

    def to_markdown(self) -> str:
        return replication_table([self.gm1, self.gm3])


def fccm_bias_demo(
    n: int = 200, T: int = 30, reps: int = 1000, seed: int = 0, workers: int = 1,
    level: float = 0.95, fit_opts: FitOptions | None = None,
) -> FccmDemo:
    """GM1 (covariates independent of the random effects given the history) next
    to GM3 (covariate shifted by the random intercept) at identical settings."""
    reports = [
        run_replication(SimConfig(gm=g, n=n, T=T, seed=seed), reps=reps, level=level, workers=workers, fit_opts=fit_opts)
        for g in (1, 3)
    ]
    return FccmDemo(*reports)


# ---------------------------------------------------------------------------
# marginal oracle


@dataclass(frozen=True)
class MarginalOracleResult:
    beta0: float
    beta1: float
    sigma2_u: float
    sigma2_x1: float
    sigma2_eps: float
    mc_n: int
    marginal_intercept: float
    marginal_intercept_se: float
    marginal_slope: float
    marginal_slope_se: float
    first_slope: float  # E(Y2 | X1) slope, equal to beta1
    first_slope_se: float
    derived_intercept: float
    derived_slope: float
    printed_intercept: float
    printed_slope: float

    def slope_z(self, value: float) -> float:
        """Distance of the MC slope from ``value`` in MC standard errors."""
        return (self.marginal_slope - value) / self.marginal_slope_se

    def to_dict(self) -> dict:
        return asdict(self)


def _ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid) / (len(y) - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(coef[0]), float(np.sqrt(cov[0, 0])), float(coef[1]), float(np.sqrt(cov[1, 1]))


def marginal_oracle(
    beta0: float = 0.0,
    beta1: float = 1.0,
    sigma2_u: float = 1.0,
    sigma2_x1: float = 1.0,
    sigma2_eps: float = 1.0,
    mc_n: int = 10**6,
    seed: int = 0,
) -> MarginalOracleResult:
    """Monte-Carlo estimate of ``E(Y3 | X2)`` in the two-point model with ``X2 = Y2``.

    ``u ~ N(0, s2_u)``, ``X1 ~ N(0, s2_x1)``, ``Y2 = b0 + b1 X1 + u + e1``,
    ``Y3 = b0 + b1 X2 + u + e2``.  Everything is jointly Gaussian, so the
    conditional mean is linear and least squares on (X2, Y3) estimates it;
    residuals are homoscedastic, so the OLS standard errors are the MC errors.

    Also reported: the closed form from Gaussian conditioning
    (slope ``b1 + s2_u / Var(X2)``, intercept ``b0 (1 - s2_u / Var(X2))``,
    ``Var(X2) = b1^2 s2_x1 + s2_u + s2_eps``) and the alternative printed form
    (slope ``(1 - rho zeta) b1 + rho``, intercept ``(1 - rho zeta - rho) b0``
    with ``rho = s2_u / (s2_u + s2_eps)``, ``zeta = b1 s2_x1 / (b1 s2_x1 + s2_u + s2_eps)``).
    """
    if mc_n < 10**4:
        raise ValidationError("mc_n must be at least 10^4")
    for name, v in (("sigma2_u", sigma2_u), ("sigma2_x1", sigma2_x1)):
        if v < 0:
            raise ValidationError(f"{name} must be nonnegative")
    if not sigma2_eps > 0:
        raise ValidationError("sigma2_eps must be positive")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(mc_n) * np.sqrt(sigma2_u)
    x1 = rng.standard_normal(mc_n) * np.sqrt(sigma2_x1)
    y2 = beta0 + beta1 * x1 + u + rng.standard_normal(mc_n) * np.sqrt(sigma2_eps)
    x2 = y2
    y3 = beta0 + beta1 * x2 + u + rng.standard_normal(mc_n) * np.sqrt(sigma2_eps)
    a, a_se, s, s_se = _ols_line(x2, y3)
    _, _, s1, s1_se = _ols_line(x1, y2)
    var_x2 = beta1**2 * sigma2_x1 + sigma2_u + sigma2_eps
    k = sigma2_u / var_x2
    rho = sigma2_u / (sigma2_u + sigma2_eps)
    den = beta1 * sigma2_x1 + sigma2_u + sigma2_eps
    zeta = beta1 * sigma2_x1 / den if den != 0 else math.nan
    return MarginalOracleResult(
        beta0, beta1, sigma2_u, sigma2_x1, sigma2_eps, mc_n,
        a, a_se, s, s_se, s1, s1_se,
        beta0 * (1 - k), beta1 + k,
        (1 - rho * zeta - rho) * beta0, (1 - rho * zeta) * beta1 + rho,
    )


# ---------------------------------------------------------------------------
# data analysis workflow


@dataclass
class AnalysisReport:
    full: FitResult
    full_inference: list[CoefInference]
    reduced: FitResult | None
    reduced_inference: list[CoefInference] | None
    lrt: VarCompTest | None
    predictions: RandomEffectsPrediction

    def table(self, digits: int = 3) -> str:
        cols, heads = [self.full_inference], ["full"]
        if self.reduced_inference is not None:
            cols.append(self.reduced_inference)
            heads.append("reduced")
        return format_inference_table(cols, heads, digits)

    def summary(self) -> str:
        parts = [self.table(), "", "variance components (full model):"]
        parts += [f"  {k} = {v:.4g}" for k, v in self.full.variance_components().items()]
        if self.reduced is not None:
            parts.append("variance components (reduced model):")
            parts += [f"  {k} = {v:.4g}" for k, v in self.reduced.variance_components().items()]
        if self.lrt is not None:
            parts.append(
                f"LRT for the treatment random effect: stat = {self.lrt.stat:.4f}, "
                f"p (chi2_1) = {self.lrt.p_chi1:.4g}, p (mixture) = {self.lrt.p_mixture:.4g}"
            )
        return "\n".join(parts)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        inference_to_csv(self.full_inference, out / "coefficients_full.csv")
        self.full.to_json(out / "fit_full.json")
        if self.reduced is not None:
            inference_to_csv(self.reduced_inference, out / "coefficients_reduced.csv")
            self.reduced.to_json(out / "fit_reduced.json")
        if self.lrt is not None:
            (out / "lrt.json").write_text(json.dumps(asdict(self.lrt), indent=2) + "\n")
        self.predictions.to_csv(out / "random_effects.csv")
        (out / "summary.txt").write_text(self.summary() + "\n")


def reduced_spec(spec: ModelSpec) -> ModelSpec | None:
    """``spec`` without its treatment random effects (None if there are none)."""
    if not spec.random_trt:
        return None
    return replace(spec, random_trt=())


def analyze_bundles(
    full_bundle: DesignBundle,
    reduced_bundle: DesignBundle | None,
    objective: str = "REML",
    level: float = 0.95,
    opts: FitOptions | None = None,
) -> AnalysisReport:
    full = fit(full_bundle, objective, opts)
    full_inf = satterthwaite_ci(full, full_bundle, level)
    reduced = reduced_inf = test = None
    if reduced_bundle is not None:
        reduced = fit(reduced_bundle, objective, opts)
        reduced_inf = satterthwaite_ci(reduced, reduced_bundle, level)
        test = lrt_variance(full, reduced)
    return AnalysisReport(full, full_inf, reduced, reduced_inf, test, predict_random_effects(full_bundle, full))


def analyze(
    data_path: str | Path,
    spec_path: str | Path,
    objective: str = "REML",
    level: float = 0.95,
    opts: FitOptions | None = None,
    schema: Mapping[str, str] | None = None,
    out_dir: str | Path | None = None,
) -> AnalysisReport:
    """Fit the model with and without the treatment random effects, then report
    coefficients with CIs, variance components, the LRT and the predicted
    random effects of the full model."""
    data = load_csv(data_path, schema=schema)
    spec = ModelSpec.from_json(spec_path)
    red = reduced_spec(spec)
    report = analyze_bundles(
        build_design(data, spec), build_design(data, red) if red is not None else None, objective, level, opts
    )
    if out_dir is not None:
        report.write(out_dir)
    return report
