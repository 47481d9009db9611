"""Fixed-effect intervals (Satterthwaite t) and variance-component LRTs."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import DesignBundle, ValidationError
from .lmm import FitResult, deviance_at, fixed_effect_cov_at

#: relative central-difference step for variance parameters
FD_STEP = 1e-4


class SatterthwaiteWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CoefInference:
    name: str
    estimate: float
    se: float
    df: float
    ci_low: float
    ci_high: float
    level: float
    df_fallback: bool = False

    @property
    def t_value(self) -> float:
        return self.estimate / self.se

    @property
    def p_value(self) -> float:
        return float(2 * stats.t.sf(abs(self.t_value), self.df))


def _free_varpar(fit: FitResult) -> np.ndarray:
    if fit.theta_fixed:
        return np.array([fit.sigma2_eps])
    return np.concatenate([fit.theta, [fit.sigma2_eps]])


def _split(fit: FitResult, x: np.ndarray) -> tuple[np.ndarray, float]:
    if fit.theta_fixed:
        return fit.theta, float(x[0])
    return x[:-1], float(x[-1])


def _steps(x: np.ndarray) -> np.ndarray:
    return FD_STEP * np.where(x != 0, np.abs(x), 1.0)


def _hessian(f, x: np.ndarray) -> np.ndarray:
    h = _steps(x)
    d = len(x)
    H = np.empty((d, d))
    f0 = f(x)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h[j]
        H[j, j] = (f(x + e) - 2 * f0 + f(x - e)) / h[j] ** 2
        for k in range(j):
            e2 = np.zeros(d)
            e2[k] = h[k]
            H[j, k] = H[k, j] = (
                f(x + e + e2) - f(x + e - e2) - f(x - e + e2) + f(x - e - e2)
            ) / (4 * h[j] * h[k])
    return H


def varpar_covariance(fit: FitResult, bundle: DesignBundle) -> np.ndarray | None:
    """Asymptotic covariance of the variance parameters: ``2 H^-1``.

    ``H`` is the central-difference Hessian of the fit's (RE)ML deviance in
    (free entries of ``Lam``, ``sigma2_eps``).  Returns ``None`` if ``H`` is
    not positive definite.
    """
    x0 = _free_varpar(fit)

    def dev(x):
        th, s2 = _split(fit, x)
        return deviance_at(th, s2, bundle, fit.objective)

    H = _hessian(dev, x0)
    H = 0.5 * (H + H.T)
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    return 2.0 * np.linalg.inv(H)


def satterthwaite_df(fit: FitResult, bundle: DesignBundle) -> tuple[np.ndarray, bool]:
    """Satterthwaite degrees of freedom for every fixed effect.

    ``df_j = 2 Var(beta_j)^2 / (g' A g)`` with ``g`` the gradient of
    ``Var(beta_j)`` in the variance parameters and ``A`` their asymptotic
    covariance.  Falls back to ``N - p`` (second value True) when the
    Hessian is not positive definite.
    """
    N, p = bundle.n_obs, bundle.p
    A = varpar_covariance(fit, bundle)
    if A is None:
        warnings.warn(
            "deviance Hessian is not positive definite; using N - p degrees of freedom",
            SatterthwaiteWarning,
            stacklevel=2,
        )
        return np.full(p, float(N - p)), True
    x0 = _free_varpar(fit)
    h = _steps(x0)
    grads = np.empty((len(x0), p))
    for j in range(len(x0)):
        e = np.zeros(len(x0))
        e[j] = h[j]
        up = np.diag(fixed_effect_cov_at(*_split(fit, x0 + e), bundle))
        dn = np.diag(fixed_effect_cov_at(*_split(fit, x0 - e), bundle))
        grads[j] = (up - dn) / (2 * h[j])
    var = np.diag(fixed_effect_cov_at(*_split(fit, x0), bundle))
    denom = np.einsum("ij,ik,kj->j", grads, A, grads)
    with np.errstate(divide="ignore"):
        df = 2.0 * var**2 / denom
    bad = ~np.isfinite(df) | (df <= 0)
    df[bad] = float(N - p)
    return df, bool(bad.any())


def satterthwaite_ci(
    fit: FitResult, bundle: DesignBundle, level: float = 0.95
) -> list[CoefInference]:
    """t-based confidence intervals with Satterthwaite degrees of freedom."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if fit.fixed_names != bundle.fixed_names:
        raise ValueError("fit does not belong to this design")
    df, fallback = satterthwaite_df(fit, bundle)
    se = fit.se
    q = stats.t.ppf(0.5 + level / 2, df)
    return [
        CoefInference(
            name, float(b), float(s), float(d), float(b - c * s), float(b + c * s), level, fallback
        )
        for name, b, s, d, c in zip(fit.fixed_names, fit.beta, se, df, q)
    ]


# ---------------------------------------------------------------------------
# likelihood ratio test


@dataclass(frozen=True)
class VarCompTest:
    stat: float
    p_chi1: float
    p_mixture: float
    full_loglik: float
    reduced_loglik: float
    objective: str


def lrt_variance(full: FitResult, reduced: FitResult) -> VarCompTest:
    """LRT for one variance component.

    ``p_chi1`` uses the chi-square(1) reference; ``p_mixture`` the 50:50
    mixture of chi-square(0) and chi-square(1) appropriate when the null
    value lies on the boundary.
    """
    if full.objective != reduced.objective:
        raise ValidationError("full and reduced fits use different objectives")
    if full.objective == "REML" and full.design_fingerprint != reduced.design_fingerprint:
        raise ValidationError("REML likelihoods are only comparable with identical fixed-effect designs")
    if full.n_obs != reduced.n_obs:
        raise ValidationError("fits use different data")
    stat = max(0.0, -2.0 * (reduced.loglik - full.loglik))
    p_chi1 = float(stats.chi2.sf(stat, 1)) if stat > 0 else 1.0
    p_mix = 0.5 * p_chi1 if stat > 0 else 1.0
    return VarCompTest(stat, p_chi1, p_mix, full.loglik, reduced.loglik, full.objective)


# ---------------------------------------------------------------------------
# tables


def inference_to_csv(rows: Sequence[CoefInference], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["coefficient", "estimate", "se", "df", "ci_low", "ci_high", "level"])
    for r in rows:
        w.writerow([r.name, r.estimate, r.se, r.df, r.ci_low, r.ci_high, r.level])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def format_inference_table(
    columns: Sequence[Sequence[CoefInference]],
    headers: Sequence[str] | None = None,
    digits: int = 3,
) -> str:
    """Aligned text table: coefficient, then (estimate, CI) per model.

    Coefficients missing from a model are left blank.
    """
    headers = list(headers or [f"model {k + 1}" for k in range(len(columns))])
    names: list[str] = []
    for col in columns:
        names.extend(r.name for r in col if r.name not in names)
    level = columns[0][0].level if columns and columns[0] else 0.95
    fmt = f"{{:.{digits}f}}"
    body = []
    for name in names:
        line = [name]
        for col in columns:
            r = next((r for r in col if r.name == name), None)
            if r is None:
                line += ["", ""]
            else:
                line += [fmt.format(r.estimate), f"({fmt.format(r.ci_low)}, {fmt.format(r.ci_high)})"]
        body.append(line)
    top = ["coefficient"]
    for h in headers:
        top += [f"{h} estimate", f"{round(level * 100)}% CI"]
    widths = [max(len(str(row[j])) for row in [top] + body) for j in range(len(top))]
    out = []
    for k, row in enumerate([top] + body):
        out.append("  ".join(str(c).rjust(w) if j else str(c).ljust(w) for j, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            out.append("-" * len(out[0]))
    return "\n".join(out)
