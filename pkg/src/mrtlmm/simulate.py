"""Synthetic micro-randomized trial data.

Three generative models with an endogenous covariate (the lagged outcome
plus noise):

* GM1: random intercept and random treatment effect, p_t = 1/2.
* GM2: random intercept/slope on both the main and the treatment part, and a
  randomization probability that depends on the covariate.
* GM3: as GM1, but the covariate depends directly on the random intercept,
  which breaks the conditional independence of covariates and random
  effects given the observed history.

Random-effect naming follows the simulation design: ``b0`` intercept,
``b1`` covariate slope, ``b2`` treatment effect, ``b3`` treatment-by-covariate
slope.  In the treatment-effect model notation ``b2`` is the "treatment
random effect".

Every individual draws from its own Philox substream (key from the seed,
individual index in the counter's high word), so a dataset does not depend on
how generation is split across workers.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import IndividualSeries, LongitudinalDataset, ModelSpec, ValidationError

GM2_CUTOFF = -1.27


@dataclass(frozen=True)
class GmParams:
    alpha0: float = -2.0
    alpha1: float = -0.3
    beta0: float = 1.0
    beta1: float = 0.3
    sigma2_b0: float = 4.0
    sigma2_b1: float = 0.25
    sigma2_b2: float = 1.0
    sigma2_b3: float = 0.25
    sigma2_eps: float = 1.0

    def __post_init__(self):
        for name in ("sigma2_b0", "sigma2_b1", "sigma2_b2", "sigma2_b3"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if not self.sigma2_eps > 0:
            raise ValidationError("sigma2_eps must be positive")


@dataclass(frozen=True)
class SimConfig:
    gm: int = 1
    n: int = 100
    T: int = 30
    seed: int = 0
    params: GmParams = field(default_factory=GmParams)

    def __post_init__(self):
        if self.gm not in (1, 2, 3):
            raise ValidationError(f"gm must be 1, 2 or 3, got {self.gm}")
        if self.n < 1 or self.T < 1:
            raise ValidationError("n and T must be at least 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        d = dict(d)
        params = GmParams(**d.pop("params", {}))
        return cls(params=params, **d)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def substream(seed: int, index: int) -> np.random.Generator:
    """Generator for unit ``index`` of the stream family identified by ``seed``."""
    key = np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(index)]))


class _Substreams:
    # reuses one bit generator; resetting the counter is much cheaper than
    # constructing a Philox per individual
    def __init__(self, seed: int):
        self._key = np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)
        self._bg = np.random.Philox(key=self._key)
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state

    def __call__(self, index: int) -> np.random.Generator:
        st = self._state
        st["state"]["counter"] = np.array([0, 0, 0, index], dtype=np.uint64)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        return self._gen


def gm_arrays(cfg: SimConfig) -> dict[str, np.ndarray]:
    """Simulate ``cfg`` and return (n, T) arrays plus the (n, 4) random effects."""
    n, T, P = cfg.n, cfg.T, cfg.params
    sd_b = np.sqrt([P.sigma2_b0, P.sigma2_b1, P.sigma2_b2, P.sigma2_b3])
    b = np.empty((n, 4))
    xnoise = np.empty((n, T))
    unif = np.empty((n, T))
    eps = np.empty((n, T))
    streams = _Substreams(cfg.seed)
    for i in range(n):
        g = streams(i)
        b[i] = g.standard_normal(4) * sd_b
        xnoise[i] = g.standard_normal(T)
        eps[i] = g.standard_normal(T)
        unif[i] = g.random(T)
    eps *= np.sqrt(P.sigma2_eps)

    X = np.empty((n, T))
    A = np.empty((n, T), dtype=np.int8)
    prob = np.empty((n, T))
    Y = np.empty((n, T))  # Y[:, t] is the outcome following decision point t
    shift = b[:, 0] if cfg.gm == 3 else 0.0
    x = xnoise[:, 0] + shift
    for t in range(T):
        X[:, t] = x
        if cfg.gm == 2:
            p = np.where(x > GM2_CUTOFF, 0.7, 0.3)
        else:
            p = np.full(n, 0.5)
        a = (unif[:, t] < p).astype(np.int8)
        y = P.alpha0 + P.alpha1 * x + b[:, 0] + a * (P.beta0 + P.beta1 * x + b[:, 2]) + eps[:, t]
        if cfg.gm == 2:
            y = y + b[:, 1] * x + a * b[:, 3] * x
        prob[:, t], A[:, t], Y[:, t] = p, a, y
        if t + 1 < T:
            x = y + xnoise[:, t + 1] + shift
    return {"X": X, "A": A, "prob": prob, "Y": Y, "b": b}


def simulate_gm(cfg: SimConfig) -> LongitudinalDataset:
    """Dataset with covariate ``x``, time index ``t = 1..T`` and the outcome after each point."""
    arr = gm_arrays(cfg)
    t = np.arange(1, cfg.T + 1)
    ones = np.ones(cfg.T, dtype=np.int8)
    series = tuple(
        IndividualSeries(
            id=str(i + 1),
            t=t,
            covariates=arr["X"][i][:, None],
            avail=ones,
            trt=arr["A"][i],
            prob=arr["prob"][i],
            outcome=arr["Y"][i],
        )
        for i in range(cfg.n)
    )
    return LongitudinalDataset(series, ("x",), has_treatment=True, has_availability=False)


def gm_model_spec(gm: int, diagonal_G: bool | None = None) -> ModelSpec:
    """The analysis model with the fixed and random terms of generative model ``gm``.

    By default GM1 and GM3 get an unstructured 2x2 G (random intercept and
    treatment effect may correlate), the usual form of this model in mixed
    model software.  GM2 defaults to a diagonal 4x4 G: it is correctly
    specified either way and the unstructured form has ten variance
    parameters.
    """
    if diagonal_G is None:
        diagonal_G = gm == 2
    if gm == 2:
        return ModelSpec(
            fixed_main=("1", "x"),
            fixed_trt=("1", "x"),
            random_main=("1", "x"),
            random_trt=("1", "x"),
            diagonal_G=diagonal_G,
        )
    return ModelSpec(
        fixed_main=("1", "x"),
        fixed_trt=("1", "x"),
        random_main=("1",),
        random_trt=("1",),
        diagonal_G=diagonal_G,
    )


def gm_truth(cfg: SimConfig) -> dict[str, float]:
    """Generating values keyed by the design column names of :func:`gm_model_spec`."""
    P = cfg.params
    truth = {
        "(Intercept)": P.alpha0,
        "x": P.alpha1,
        "trt": P.beta0,
        "trt:x": P.beta1,
        "Var((Intercept))": P.sigma2_b0,
        "Var(trt)": P.sigma2_b2,
        "Var(residual)": P.sigma2_eps,
    }
    if cfg.gm == 2:
        truth["Var(x)"] = P.sigma2_b1
        truth["Var(trt:x)"] = P.sigma2_b3
    return truth


# ---------------------------------------------------------------------------
# HeartSteps-like generator

HEARTSTEPS_COEFS = {
    # point estimates of the model without a random treatment effect
    "alpha0": 1.997,
    "alpha1": -0.009,
    "alpha2": 0.840,
    "alpha3": 0.537,
    "alpha0_avail": -0.182,
    "alpha1_avail": 0.008,
    "alpha2_avail": -0.863,
    "alpha3_avail": -0.154,
    "beta0": 0.410,
    "beta1": -0.017,
    "beta2": 0.130,
    "sigma2_b0": 0.182,
    "sigma2_b1": 0.0,
    "cov_b01": 0.0,
    "sigma2_eps": 7.139,
}
HEARTSTEPS_AVAIL_RATE = 0.804
HEARTSTEPS_RAND_PROB = 0.6
DECISIONS_PER_DAY = 5


def heartsteps_spec(random_treatment: bool = True, diagonal_G: bool = False) -> ModelSpec:
    """Model with availability-gated treatment and availability-by-covariate interactions."""
    return ModelSpec(
        fixed_main=("1", "day", "loc", "prior_steps"),
        fixed_trt=("1", "day", "loc"),
        random_main=("1",),
        random_trt=("1",) if random_treatment else (),
        availability_interactions=True,
        gate_treatment_by_availability=True,
        diagonal_G=diagonal_G,
    )


def simulate_heartsteps_like(
    n: int = 37,
    T: int = 210,
    coefs: Mapping[str, float] | None = None,
    avail_rate: float = HEARTSTEPS_AVAIL_RATE,
    seed: int = 0,
) -> LongitudinalDataset:
    """Synthetic data with the structure of the availability-gated treatment model.

    Covariates: ``day`` (decision index // 5), ``loc`` (home/work indicator,
    Bernoulli(1/2)) and ``prior_steps`` (half the previous outcome plus
    standard normal noise; N(1, 1) at the first point).  Availability is
    Bernoulli(``avail_rate``); available points are treated with probability
    0.6.  ``prob`` records 0.6 at available points and 0 otherwise.
    """
    if not 0 < avail_rate <= 1:
        raise ValidationError("avail_rate must lie in (0, 1]")
    if n < 1 or T < 1:
        raise ValidationError("n and T must be at least 1")
    c = dict(HEARTSTEPS_COEFS)
    if coefs:
        unknown = set(coefs) - set(c)
        if unknown:
            raise ValidationError(f"unknown coefficients: {sorted(unknown)}")
        c.update(coefs)
    G = np.array([[c["sigma2_b0"], c["cov_b01"]], [c["cov_b01"], c["sigma2_b1"]]])
    w, V = np.linalg.eigh(G)
    if w.min() < -1e-12:
        raise ValidationError("random-effect covariance is not positive semidefinite")
    G_half = V * np.sqrt(np.clip(w, 0.0, None))

    streams = _Substreams(seed)
    day = np.arange(T) // DECISIONS_PER_DAY
    series = []
    for i in range(n):
        g = streams(i)
        b = G_half @ g.standard_normal(2)
        avail = (g.random(T) < avail_rate).astype(np.int8)
        trt = ((g.random(T) < HEARTSTEPS_RAND_PROB) & (avail == 1)).astype(np.int8)
        loc = (g.random(T) < 0.5).astype(float)
        noise = g.standard_normal(T)
        eps = g.standard_normal(T) * np.sqrt(c["sigma2_eps"])
        prior = np.empty(T)
        y = np.empty(T)
        for t in range(T):
            prior[t] = (1.0 if t == 0 else 0.5 * y[t - 1]) + noise[t]
            main = c["alpha0"] + c["alpha1"] * day[t] + c["alpha2"] * loc[t] + c["alpha3"] * prior[t]
            inter = (
                c["alpha0_avail"]
                + c["alpha1_avail"] * day[t]
                + c["alpha2_avail"] * loc[t]
                + c["alpha3_avail"] * prior[t]
            )
            effect = c["beta0"] + c["beta1"] * day[t] + c["beta2"] * loc[t] + b[1]
            y[t] = main + avail[t] * inter + b[0] + trt[t] * effect + eps[t]
        series.append(
            IndividualSeries(
                id=str(i + 1),
                t=np.arange(1, T + 1),
                covariates=np.column_stack([day.astype(float), loc, prior]),
                avail=avail,
                trt=trt,
                prob=np.where(avail == 1, HEARTSTEPS_RAND_PROB, 0.0),
                outcome=y,
            )
        )
    return LongitudinalDataset(
        tuple(series), ("day", "loc", "prior_steps"), has_treatment=True, has_availability=True
    )
