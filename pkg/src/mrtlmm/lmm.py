"""Linear mixed model fitting by profiled (RE)ML deviance.

Model for individual ``i``::

    y_i = X_i beta + Z_i b_i + eps_i,   b_i ~ N(0, G),   eps_i ~ N(0, s2 I)

with ``G = s2 * Lam Lam^T`` and ``Lam`` a lower-triangular relative Cholesky
factor.  Covariates (including endogenous ones and the treatment indicator)
are conditioned on, so this is the ordinary LMM likelihood.  ``beta`` and
``s2`` are profiled out analytically; only the free entries of ``Lam``
(``theta``) are searched numerically.

All likelihood evaluations work from the per-individual cross products
``Z_i'Z_i`` and ``Z_i'[X_i, y_i]``, so their cost does not grow with the
number of time points.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import linalg, optimize, stats

from ._kernels import deviance_parts, profile_accumulate
from .data import CrossProducts, DesignBundle, ValidationError

log = logging.getLogger(__name__)

Objective = Literal["ML", "REML"]

#: returned by :func:`profiled_deviance` when the value is not finite
DEVIANCE_PENALTY = 1e100
#: deviance difference below which two optimizer runs count as the same optimum
SAME_OPTIMUM_TOL = 1e-6
#: sigma2_eps below this fraction of a random-effect variance means the fit degenerated
RESIDUAL_COLLAPSE = 1e-10

_LOG2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """A numerical computation could not be completed."""


class RankDeficientError(NumericalError):
    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(
            "fixed-effect design is rank deficient; collinear columns: " + ", ".join(self.columns)
        )


# ---------------------------------------------------------------------------
# parameterisation


def n_theta(q: int, diagonal: bool) -> int:
    return q if diagonal else q * (q + 1) // 2


def theta_diag_index(q: int, diagonal: bool) -> np.ndarray:
    """Positions in ``theta`` that hold diagonal entries of ``Lam``."""
    if diagonal:
        return np.arange(q)
    rows, cols = np.tril_indices(q)
    return np.flatnonzero(rows == cols)


def theta_to_lambda(theta: np.ndarray, q: int, diagonal: bool) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if diagonal:
        return np.diag(theta)
    lam = np.zeros((q, q))
    lam[np.tril_indices(q)] = theta
    return lam


def lambda_to_theta(lam: np.ndarray, diagonal: bool) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if diagonal:
        return np.diag(lam).copy()
    return lam[np.tril_indices(lam.shape[0])].copy()


def _canonical(theta: np.ndarray, q: int, diagonal: bool) -> np.ndarray:
    # Lam and Lam*diag(+-1) give the same G; report nonnegative diagonals
    lam = theta_to_lambda(theta, q, diagonal)
    sign = np.where(np.diag(lam) < 0, -1.0, 1.0)
    return lambda_to_theta(lam * sign, diagonal)


@dataclass(frozen=True)
class VarianceParams:
    """Relative Cholesky factor ``lam`` and residual variance; ``G = sigma2_eps * lam lam^T``."""

    lam: np.ndarray
    sigma2_eps: float

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if lam.shape[0] != lam.shape[1]:
            raise ValueError("lam must be square")
        if np.any(np.triu(lam, 1) != 0):
            raise ValueError("lam must be lower triangular")
        object.__setattr__(self, "lam", lam)
        if not self.sigma2_eps > 0:
            raise ValueError(f"sigma2_eps must be positive, got {self.sigma2_eps}")

    @property
    def G(self) -> np.ndarray:
        return self.sigma2_eps * self.lam @ self.lam.T

    @classmethod
    def from_G(cls, G: np.ndarray, sigma2_eps: float) -> "VarianceParams":
        """Inverse of :attr:`G`; ``G`` may be singular (pivot-free LDL fallback)."""
        G = np.atleast_2d(np.asarray(G, dtype=float)) / sigma2_eps
        q = G.shape[0]
        lam = np.zeros((q, q))
        for j in range(q):
            d = G[j, j] - lam[j, :j] @ lam[j, :j]
            lam[j, j] = np.sqrt(max(d, 0.0))
            for i in range(j + 1, q):
                s = G[i, j] - lam[i, :j] @ lam[j, :j]
                lam[i, j] = s / lam[j, j] if lam[j, j] > 0 else 0.0
        return cls(lam, sigma2_eps)


# ---------------------------------------------------------------------------
# direct (oracle) quantities


def marginal_covariance(Z_i: np.ndarray, vp: VarianceParams) -> np.ndarray:
    """``V_i = Z_i G Z_i^T + sigma2_eps I`` for one individual."""
    if not vp.sigma2_eps > 0:
        raise ValueError("sigma2_eps must be positive")
    Z_i = np.atleast_2d(np.asarray(Z_i, dtype=float))
    if Z_i.shape[1] != vp.lam.shape[0]:
        raise ValueError(f"Z_i has {Z_i.shape[1]} columns, G is {vp.lam.shape[0]} x {vp.lam.shape[0]}")
    V = Z_i @ vp.G @ Z_i.T + vp.sigma2_eps * np.eye(Z_i.shape[0])
    return 0.5 * (V + V.T)


def direct_deviance(bundle: DesignBundle, beta: np.ndarray, vp: VarianceParams) -> float:
    """``-2 sum_i log N(y_i; X_i beta, V_i)`` from the explicit normal density."""
    beta = np.asarray(beta, dtype=float)
    total = 0.0
    for x, z, v in zip(bundle.X, bundle.Z, bundle.y):
        V = marginal_covariance(z, vp)
        try:
            lp = stats.multivariate_normal.logpdf(v, mean=x @ beta, cov=V, allow_singular=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"V_i is not positive definite: {exc}") from None
        total += lp
    return -2.0 * float(total)


# ---------------------------------------------------------------------------
# profiled quantities


@dataclass
class _Profile:
    logdet_V: float  # sum_i log|V_i / s2|
    M: np.ndarray  # sum_i [X y]' (V_i/s2)^{-1} [X y]
    p: int

    @property
    def XtVX(self) -> np.ndarray:
        return self.M[: self.p, : self.p]

    @property
    def XtVy(self) -> np.ndarray:
        return self.M[: self.p, self.p]


def _profile(lam: np.ndarray, cp: CrossProducts) -> _Profile:
    p = cp.S.shape[0] - 1
    logdet, M = profile_accumulate(np.ascontiguousarray(lam, dtype=float), cp.Rzz, cp.Rzx, cp.S)
    if not np.isfinite(logdet):
        raise np.linalg.LinAlgError("I + Lam' Z_i'Z_i Lam is not positive definite")
    return _Profile(logdet, M, p)


def _parts(lam: np.ndarray, cp: CrossProducts) -> tuple[float, float, float]:
    return deviance_parts(np.ascontiguousarray(lam, dtype=float), cp.Rzz, cp.Rzx, cp.S)


def _solve_fixed(prof: _Profile) -> tuple[np.ndarray, np.ndarray, float, float]:
    """beta-hat, chol factor of X'V^-1X, its log-determinant, weighted RSS."""
    L = np.linalg.cholesky(prof.XtVX)
    u = linalg.solve_triangular(L, prof.XtVy, lower=True)
    beta = linalg.solve_triangular(L.T, u, lower=False)
    r2 = float(prof.M[prof.p, prof.p] - u @ u)
    logdet_x = 2.0 * float(np.sum(np.log(np.diag(L))))
    return beta, L, logdet_x, r2


def _check_objective(objective: str) -> Objective:
    obj = objective.upper()
    if obj not in ("ML", "REML"):
        raise ValueError(f"objective must be 'ML' or 'REML', got {objective!r}")
    return obj  # type: ignore[return-value]


def profiled_deviance(
    theta: np.ndarray, bundle: DesignBundle, objective: Objective = "REML"
) -> float:
    """-2 log-likelihood (ML) or REML criterion, profiled over ``beta`` and ``sigma2_eps``.

    ML:   sum_i log|V_i/s2| + N (1 + log(2 pi r2 / N))
    REML: sum_i log|V_i/s2| + log|X'(V/s2)^-1 X| + (N-p)(1 + log(2 pi r2 / (N-p)))

    where ``r2`` is the generalized residual sum of squares.  Full constants
    are included so values are comparable with :func:`direct_deviance`.
    Non-finite values (e.g. an exact fit, r2 = 0) return ``DEVIANCE_PENALTY``.
    """
    objective = _check_objective(objective)
    lam = theta_to_lambda(theta, bundle.q, bundle.diagonal_G)
    with np.errstate(all="ignore"):
        logdet, logdet_x, r2 = _parts(lam, bundle.cross_products)
        N, p = bundle.n_obs, bundle.p
        if objective == "ML":
            dev = logdet + N * (1.0 + _LOG2PI + np.log(r2 / N))
        else:
            dev = logdet + logdet_x + (N - p) * (1.0 + _LOG2PI + np.log(r2 / (N - p)))
    return float(dev) if np.isfinite(dev) else DEVIANCE_PENALTY


def deviance_at(
    theta: np.ndarray, sigma2_eps: float, bundle: DesignBundle, objective: Objective = "REML"
) -> float:
    """(RE)ML deviance at given ``theta`` and ``sigma2_eps`` with only ``beta`` profiled."""
    objective = _check_objective(objective)
    lam = theta_to_lambda(theta, bundle.q, bundle.diagonal_G)
    logdet, logdet_x, r2 = _parts(lam, bundle.cross_products)
    N, p = bundle.n_obs, bundle.p
    if objective == "ML":
        return float(logdet + N * (_LOG2PI + np.log(sigma2_eps)) + r2 / sigma2_eps)
    return float(logdet + logdet_x + (N - p) * (_LOG2PI + np.log(sigma2_eps)) + r2 / sigma2_eps)


def fixed_effect_cov_at(theta: np.ndarray, sigma2_eps: float, bundle: DesignBundle) -> np.ndarray:
    """``(sum_i X_i' V_i^-1 X_i)^-1`` at given variance parameters."""
    lam = theta_to_lambda(theta, bundle.q, bundle.diagonal_G)
    prof = _profile(lam, bundle.cross_products)
    return sigma2_eps * linalg.inv(prof.XtVX)


def _collinear_columns(X: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> list[str]:
    """Names of columns involved in an exact (to ``tol``) linear dependence.

    Columns are scaled to unit norm first, so wildly different magnitudes
    (e.g. an exploding covariate path next to an intercept) do not register
    as dependence.
    """
    norms = np.linalg.norm(X, axis=0)
    bad: set[int] = {j for j in range(X.shape[1]) if norms[j] == 0}
    Xs = X / np.where(norms > 0, norms, 1.0)
    keep: list[int] = []
    for j in range(X.shape[1]):
        if j in bad:
            continue
        cols = keep + [j]
        _, s, vt = np.linalg.svd(Xs[:, cols], full_matrices=False)
        if s[-1] <= tol * s[0]:
            v = vt[-1]
            bad.update(c for c, w in zip(cols, v) if abs(w) > 1e-8)
        else:
            keep.append(j)
    return [names[j] for j in sorted(bad)]


def check_rank(bundle: DesignBundle) -> None:
    bad = _collinear_columns(bundle.X_all, bundle.fixed_names)
    if bad:
        raise RankDeficientError(bad)


def gls_fixed_effects(bundle: DesignBundle, vp: VarianceParams) -> tuple[np.ndarray, np.ndarray]:
    """Generalized least squares: solves ``sum_i X_i' V_i^-1 (y_i - X_i beta) = 0``.

    Returns ``beta`` and ``(sum_i X_i' V_i^-1 X_i)^-1``.
    """
    if vp.lam.shape[0] != bundle.q:
        raise ValueError("variance parameters do not match the random-effect design")
    prof = _profile(vp.lam, bundle.cross_products)
    try:
        beta, L, _, _ = _solve_fixed(prof)
    except np.linalg.LinAlgError:
        raise RankDeficientError(_collinear_columns(bundle.X_all, bundle.fixed_names) or bundle.fixed_names) from None
    d = 1.0 / np.sqrt(np.diag(prof.XtVX))
    if np.linalg.cond(prof.XtVX * np.outer(d, d)) > 1e13:
        raise RankDeficientError(_collinear_columns(bundle.X_all, bundle.fixed_names) or bundle.fixed_names)
    Linv = linalg.solve_triangular(L, np.eye(bundle.p), lower=True)
    cov = vp.sigma2_eps * (Linv.T @ Linv)
    return beta, 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    """Optimizer settings.

    Each start runs bounded Nelder-Mead until the simplex spans less than
    ``xatol`` in every coordinate and ``fatol`` in deviance, or until
    ``max_evals`` evaluations.  Start 0 is ``Lam = I``; the others scale its
    diagonal by ``U(*jitter)`` draws from ``seed``.  ``theta_fixed`` skips
    the search entirely.
    """

    n_starts: int = 5
    max_evals: int = 5000
    xatol: float = 1e-8
    fatol: float = 1e-8
    jitter: tuple[float, float] = (0.5, 1.5)
    seed: int = 0
    theta_fixed: np.ndarray | None = None
    trace: bool = False


@dataclass
class FitResult:
    beta: np.ndarray
    variance: VarianceParams
    G_hat: np.ndarray
    loglik: float
    beta_cov: np.ndarray
    objective: Objective
    converged: bool
    n_evals: int
    theta: np.ndarray
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]
    diagonal_G: bool
    n_obs: int
    n_groups: int
    design_fingerprint: str
    theta_fixed: bool = False
    optimizer_trace: list | None = field(default=None, repr=False)

    @property
    def deviance(self) -> float:
        return -2.0 * self.loglik

    @property
    def sigma2_eps(self) -> float:
        return self.variance.sigma2_eps

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))

    def coef(self) -> dict[str, float]:
        return dict(zip(self.fixed_names, map(float, self.beta)))

    def variance_components(self) -> dict[str, float]:
        """Random-effect variances, correlations and the residual variance."""
        out = {}
        G = self.G_hat
        for j, name in enumerate(self.random_names):
            out[f"Var({name})"] = float(G[j, j])
        for j in range(len(self.random_names)):
            for k in range(j):
                denom = np.sqrt(G[j, j] * G[k, k])
                corr = G[j, k] / denom if denom > 0 else float("nan")
                if not self.diagonal_G:
                    out[f"Corr({self.random_names[k]}, {self.random_names[j]})"] = float(corr)
        out["Var(residual)"] = float(self.sigma2_eps)
        return out

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "loglik": self.loglik,
            "deviance": self.deviance,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
            "fixed_effects": [
                {"name": n, "estimate": float(b), "se": float(s)}
                for n, b, s in zip(self.fixed_names, self.beta, self.se)
            ],
            "variance_components": self.variance_components(),
            "G": self.G_hat.tolist(),
            "theta": self.theta.tolist(),
            "convergence": {
                "converged": self.converged,
                "n_evals": self.n_evals,
                "theta_fixed": self.theta_fixed,
            },
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def write_trace_csv(fit: FitResult, path: str | Path) -> None:
    """Dump the optimizer trace (start, evaluation, deviance, theta...) as CSV."""
    if not fit.optimizer_trace:
        raise ValueError("fit has no optimizer trace; refit with FitOptions(trace=True)")
    k = len(fit.theta)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "eval", "deviance"] + [f"theta{j}" for j in range(k)])
        for row in fit.optimizer_trace:
            w.writerow([row[0], row[1], repr(row[2])] + [repr(float(v)) for v in row[3]])


def _starting_points(k: int, diag_idx: np.ndarray, opts: FitOptions) -> list[np.ndarray]:
    base = np.zeros(k)
    base[diag_idx] = 1.0
    rng = np.random.default_rng(opts.seed)
    starts = [base]
    for _ in range(max(opts.n_starts, 1) - 1):
        x0 = base.copy()
        x0[diag_idx] *= rng.uniform(*opts.jitter, size=len(diag_idx))
        starts.append(x0)
    return starts


def fit(
    bundle: DesignBundle, objective: Objective = "REML", opts: FitOptions | None = None
) -> FitResult:
    """Fit the mixed model by minimizing the profiled deviance over ``theta``.

    The search is a bounded Nelder-Mead (diagonal entries of ``Lam`` >= 0)
    restarted from ``opts.n_starts`` points.  The best converged run wins
    unless a run that exhausted its budget is lower by more than
    ``SAME_OPTIMUM_TOL``; ``converged`` is then False (not an exception).
    Diagonal entries that end near zero are snapped to the boundary when
    that does not increase the deviance.
    """
    objective = _check_objective(objective)
    opts = opts or FitOptions()
    N, p, q = bundle.n_obs, bundle.p, bundle.q
    if q < 1:
        raise ValidationError("no random effects (q = 0)")
    if N <= p:
        raise ValidationError(f"need more observations ({N}) than fixed effects ({p})")
    check_rank(bundle)

    k = n_theta(q, bundle.diagonal_G)
    diag_idx = theta_diag_index(q, bundle.diagonal_G)
    trace: list | None = [] if opts.trace else None
    n_evals = 0

    if opts.theta_fixed is not None:
        theta = np.asarray(opts.theta_fixed, dtype=float).copy()
        if theta.shape != (k,):
            raise ValueError(f"theta_fixed must have length {k}")
        best_dev = profiled_deviance(theta, bundle, objective)
        n_evals, converged = 1, True
    else:
        lb = np.full(k, -np.inf)
        lb[diag_idx] = 0.0
        bounds = optimize.Bounds(lb, np.full(k, np.inf))
        runs = []
        for s, x0 in enumerate(_starting_points(k, diag_idx, opts)):
            counter = [0]

            def f(th, s=s, counter=counter):
                dev = profiled_deviance(th, bundle, objective)
                counter[0] += 1
                if trace is not None:
                    trace.append((s, counter[0], dev, np.array(th)))
                return dev

            res = optimize.minimize(
                f,
                x0,
                method="Nelder-Mead",
                bounds=bounds,
                options={"maxfev": opts.max_evals, "xatol": opts.xatol, "fatol": opts.fatol},
            )
            n_evals += counter[0]
            runs.append(res)
        best = min(runs, key=lambda r: r.fun)
        ok = [r for r in runs if r.success]
        if ok:
            # a run that stopped on the budget only wins if it is clearly better
            best_ok = min(ok, key=lambda r: r.fun)
            if best_ok.fun <= best.fun + SAME_OPTIMUM_TOL:
                best = best_ok
        theta, best_dev, converged = np.array(best.x), float(best.fun), bool(best.success)
        # boundary snap
        for j in diag_idx:
            if 0 < theta[j] < 1e-4:
                trial = theta.copy()
                trial[j] = 0.0
                dev = profiled_deviance(trial, bundle, objective)
                n_evals += 1
                if dev <= best_dev:
                    theta, best_dev = trial, dev
        theta = _canonical(theta, q, bundle.diagonal_G)

    if best_dev >= DEVIANCE_PENALTY:
        raise NumericalError("deviance is not finite at the optimum (exact fit or degenerate data?)")
    lam = theta_to_lambda(theta, q, bundle.diagonal_G)
    prof = _profile(lam, bundle.cross_products)
    beta, L, _, r2 = _solve_fixed(prof)
    sigma2 = r2 / (N if objective == "ML" else N - p)
    if not sigma2 > 0 or float(np.max(np.abs(lam))) ** 2 > 1.0 / RESIDUAL_COLLAPSE:
        # e.g. no within-individual variation: the likelihood is unbounded
        raise NumericalError("residual variance collapsed to zero; the likelihood has no maximum")
    vp = VarianceParams(lam, sigma2)
    Linv = linalg.solve_triangular(L, np.eye(p), lower=True)
    beta_cov = sigma2 * (Linv.T @ Linv)
    if not converged:
        log.warning("optimizer did not converge within %d evaluations", opts.max_evals)
    return FitResult(
        beta=beta,
        variance=vp,
        G_hat=vp.G,
        loglik=-0.5 * best_dev,
        beta_cov=0.5 * (beta_cov + beta_cov.T),
        objective=objective,
        converged=converged,
        n_evals=n_evals,
        theta=theta,
        fixed_names=bundle.fixed_names,
        random_names=bundle.random_names,
        diagonal_G=bundle.diagonal_G,
        n_obs=N,
        n_groups=bundle.n,
        design_fingerprint=bundle.fingerprint,
        theta_fixed=opts.theta_fixed is not None,
        optimizer_trace=trace,
    )


# ---------------------------------------------------------------------------
# random-effect prediction


@dataclass
class RandomEffectsPrediction:
    ids: tuple[str, ...]
    names: tuple[str, ...]
    b_hat: np.ndarray  # (n, q)
    cond_cov: np.ndarray  # (n, q, q)

    @property
    def cond_sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diagonal(self.cond_cov, axis1=1, axis2=2), 0.0, None))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"b[{n}]" for n in self.names] + [f"sd[{n}]" for n in self.names])
            for pid, b, s in zip(self.ids, self.b_hat, self.cond_sd):
                w.writerow([pid] + [repr(float(v)) for v in b] + [repr(float(v)) for v in s])


def predict_random_effects(bundle: DesignBundle, fit: FitResult) -> RandomEffectsPrediction:
    """Empirical Bayes predictions ``b_i = G Z_i' V_i^-1 (y_i - X_i beta)``.

    ``cond_cov[i] = G - G Z_i' V_i^-1 Z_i G`` is the posterior covariance of
    ``b_i`` at the plugged-in parameters.  Computed in the equivalent form
    ``Lam A_i^-1 Lam' Z_i' r_i`` with ``A_i = Lam' Z_i'Z_i Lam + I``.
    """
    if fit.fixed_names != bundle.fixed_names or fit.random_names != bundle.random_names:
        raise ValueError("fit does not belong to this design")
    if not fit.converged:
        log.warning("predicting random effects from a non-converged fit")
    lam, s2 = fit.variance.lam, fit.variance.sigma2_eps
    cp = bundle.cross_products
    q = bundle.q
    A = lam.T @ cp.ZtZ @ lam + np.eye(q)
    # Z_i' r_i = Z_i' y_i - Z_i' X_i beta
    Ztr = cp.ZtXy[:, :, -1] - cp.ZtXy[:, :, :-1] @ fit.beta
    u = np.linalg.solve(A, (lam.T @ Ztr[:, :, None]))[:, :, 0]
    b_hat = u @ lam.T
    Ainv = np.linalg.inv(A)
    cond = s2 * lam @ Ainv @ lam.T
    cond = 0.5 * (cond + np.swapaxes(cond, 1, 2))
    return RandomEffectsPrediction(bundle.ids, bundle.random_names, b_hat, cond)
