"""Longitudinal / micro-randomized trial data and design matrices.

A dataset is stored in long format: one record per person-time, holding the
covariates observed before the decision point, the availability indicator,
the randomized treatment, its randomization probability and the proximal
outcome that follows the decision point.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

INTERCEPT = "1"

DEFAULT_SCHEMA = {
    "id": "id",
    "t": "t",
    "avail": "avail",
    "trt": "trt",
    "prob": "prob",
    "y": "y",
}
_REQUIRED_ROLES = ("id", "t", "y")
_OPTIONAL_ROLES = ("avail", "trt", "prob")


class DataError(ValueError):
    """Base class for input problems (bad files, bad specs, bad values)."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IndividualSeries:
    """All records of one individual, ordered by time index.

    Arrays are read-only.  ``prob`` is ``None`` when the source carried no
    randomization-probability column.
    """

    id: str
    t: np.ndarray
    covariates: np.ndarray
    avail: np.ndarray
    trt: np.ndarray
    prob: np.ndarray | None
    outcome: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(n, -1)
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=np.int64)))
        object.__setattr__(self, "covariates", _frozen(cov))
        object.__setattr__(self, "avail", _frozen(np.asarray(self.avail, dtype=np.int8)))
        object.__setattr__(self, "trt", _frozen(np.asarray(self.trt, dtype=np.int8)))
        object.__setattr__(self, "outcome", _frozen(np.asarray(self.outcome, dtype=float)))
        if self.prob is not None:
            object.__setattr__(self, "prob", _frozen(np.asarray(self.prob, dtype=float)))
        for name in ("covariates", "avail", "trt", "outcome"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"individual {self.id!r}: {name} has wrong length")
        if self.prob is not None and len(self.prob) != n:
            raise ValidationError(f"individual {self.id!r}: prob has wrong length")

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    individuals: tuple[IndividualSeries, ...]
    covariate_names: tuple[str, ...]
    has_treatment: bool = True
    has_availability: bool = True

    def __post_init__(self):
        object.__setattr__(self, "individuals", tuple(self.individuals))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        self._validate()

    def _validate(self):
        k = len(self.covariate_names)
        if len(set(self.covariate_names)) != k:
            raise ValidationError("duplicate covariate names")
        for name in self.covariate_names:
            if name in DEFAULT_SCHEMA or name == INTERCEPT:
                raise ValidationError(f"covariate name {name!r} is reserved")
        seen = set()
        for s in self.individuals:
            if s.id in seen:
                raise ValidationError(f"duplicate individual id {s.id!r}")
            seen.add(s.id)
            if len(s) < 1:
                raise ValidationError(f"individual {s.id!r} has no records")
            if np.any(np.diff(s.t) <= 0):
                raise ValidationError(f"individual {s.id!r}: time indices not strictly increasing")
            if s.covariates.shape[1] != k:
                raise ValidationError(f"individual {s.id!r}: expected {k} covariates")
            if not np.all(np.isfinite(s.outcome)) or not np.all(np.isfinite(s.covariates)):
                raise ValidationError(f"individual {s.id!r}: missing or non-finite values")
            if not np.all(np.isin(s.trt, (0, 1))) or not np.all(np.isin(s.avail, (0, 1))):
                raise ValidationError(f"individual {s.id!r}: trt/avail must be 0 or 1")
            if not self.has_treatment and np.any(s.trt != 0):
                raise ValidationError(f"individual {s.id!r}: treatment recorded but has_treatment is false")
            if not self.has_availability and np.any(s.avail != 1):
                raise ValidationError(f"individual {s.id!r}: availability must be 1 when not recorded")
            bad = np.flatnonzero((s.trt == 1) & (s.avail == 0))
            if bad.size:
                raise ValidationError(
                    f"individual {s.id!r}, t={s.t[bad[0]]}: treatment delivered while unavailable"
                )
            if self.has_treatment and s.prob is not None:
                p = s.prob[s.avail == 1]
                if np.any(~((p > 0) & (p < 1))):
                    raise ValidationError(
                        f"individual {s.id!r}: randomization probability outside (0, 1)"
                    )

    @property
    def n(self) -> int:
        return len(self.individuals)

    @property
    def n_obs(self) -> int:
        return sum(len(s) for s in self.individuals)

    @property
    def has_prob(self) -> bool:
        return any(s.prob is not None for s in self.individuals)

    def subset(self, order: Sequence[int]) -> "LongitudinalDataset":
        """Dataset with individuals taken in the given order."""
        return LongitudinalDataset(
            tuple(self.individuals[i] for i in order),
            self.covariate_names,
            self.has_treatment,
            self.has_availability,
        )


def dataset_equal(a: LongitudinalDataset, b: LongitudinalDataset) -> bool:
    """Field-by-field exact comparison (including dtypes)."""
    if (a.covariate_names, a.has_treatment, a.has_availability) != (
        b.covariate_names,
        b.has_treatment,
        b.has_availability,
    ):
        return False
    if a.n != b.n:
        return False
    for s, r in zip(a.individuals, b.individuals):
        if s.id != r.id:
            return False
        for name in ("t", "covariates", "avail", "trt", "outcome"):
            x, y = getattr(s, name), getattr(r, name)
            if x.dtype != y.dtype or not np.array_equal(x, y):
                return False
        if (s.prob is None) != (r.prob is None):
            return False
        if s.prob is not None and not np.array_equal(s.prob, r.prob):
            return False
    return True


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {line}: column {col!r} value {text!r} is not numeric") from None
    if not np.isfinite(value):
        raise ParseError(f"line {line}: column {col!r} value {text!r} is not finite")
    return value


def _parse_flag(text: str, line: int, col: str) -> int:
    value = _parse_float(text, line, col)
    if value not in (0.0, 1.0):
        raise ParseError(f"line {line}: column {col!r} must be 0 or 1, got {text!r}")
    return int(value)


def load_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    covariates: Sequence[str] | None = None,
) -> LongitudinalDataset:
    """Read a long-format CSV (one row per person-time).

    ``schema`` maps the roles ``id, t, y`` (required) and ``avail, trt, prob``
    (optional) to column names; unspecified roles use their default names.
    Unless ``covariates`` is given, every column not bound to a role is a
    covariate.  Individuals keep their order of first appearance.
    """
    roles = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(roles)
        if unknown:
            raise SchemaError(f"unknown schema roles: {sorted(unknown)}")
        roles.update(schema)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names in header")
        col = {name: j for j, name in enumerate(header)}
        for role in _REQUIRED_ROLES:
            if roles[role] not in col:
                raise SchemaError(f"{path}: missing required column {roles[role]!r} ({role})")
        present = {role for role in _OPTIONAL_ROLES if roles[role] in col}
        bound = {roles[r] for r in (*_REQUIRED_ROLES, *present)}
        if covariates is None:
            cov_names = [h for h in header if h not in bound]
        else:
            cov_names = list(covariates)
            missing = [c for c in cov_names if c not in col]
            if missing:
                raise SchemaError(f"{path}: missing covariate columns {missing}")

        groups: dict[str, list] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            pid = row[col[roles["id"]]].strip()
            t = _parse_float(row[col[roles["t"]]], line, roles["t"])
            if t != int(t):
                raise ParseError(f"line {line}: time index {t!r} is not an integer")
            y = _parse_float(row[col[roles["y"]]], line, roles["y"])
            a = _parse_flag(row[col[roles["avail"]]], line, roles["avail"]) if "avail" in present else 1
            d = _parse_flag(row[col[roles["trt"]]], line, roles["trt"]) if "trt" in present else 0
            p = _parse_float(row[col[roles["prob"]]], line, roles["prob"]) if "prob" in present else np.nan
            x = [_parse_float(row[col[c]], line, c) for c in cov_names]
            if a == 0 and d == 1:
                raise ValidationError(f"line {line}: treatment delivered while unavailable")
            groups.setdefault(pid, []).append((int(t), a, d, p, y, x, line))

    series = []
    k = len(cov_names)
    for pid, recs in groups.items():
        recs.sort(key=lambda r: r[0])
        ts = [r[0] for r in recs]
        for j in range(1, len(ts)):
            if ts[j] == ts[j - 1]:
                raise ValidationError(
                    f"line {recs[j][6]}: duplicate (id, t) = ({pid!r}, {ts[j]})"
                )
        series.append(
            IndividualSeries(
                id=pid,
                t=np.array(ts, dtype=np.int64),
                covariates=np.array([r[5] for r in recs], dtype=float).reshape(len(recs), k),
                avail=np.array([r[1] for r in recs], dtype=np.int8),
                trt=np.array([r[2] for r in recs], dtype=np.int8),
                prob=np.array([r[3] for r in recs], dtype=float) if "prob" in present else None,
                outcome=np.array([r[4] for r in recs], dtype=float),
            )
        )
    return LongitudinalDataset(
        tuple(series),
        tuple(cov_names),
        has_treatment="trt" in present,
        has_availability="avail" in present,
    )


def save_csv(data: LongitudinalDataset, path: str | Path) -> None:
    """Write ``data`` in the canonical column order ``id,t,avail,trt,prob,y,<covariates>``.

    Floats are written with ``repr`` so a load round-trip is exact.
    """
    header = ["id", "t"]
    if data.has_availability:
        header.append("avail")
    if data.has_treatment:
        header.append("trt")
    has_prob = data.has_prob
    if has_prob:
        header.append("prob")
    header.append("y")
    header.extend(data.covariate_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in data.individuals:
            for j in range(len(s)):
                row = [s.id, int(s.t[j])]
                if data.has_availability:
                    row.append(int(s.avail[j]))
                if data.has_treatment:
                    row.append(int(s.trt[j]))
                if has_prob:
                    row.append(repr(float(s.prob[j])) if s.prob is not None else "nan")
                row.append(repr(float(s.outcome[j])))
                row.extend(repr(float(v)) for v in s.covariates[j])
                w.writerow(row)


# ---------------------------------------------------------------------------
# Model specification and design matrices


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter which block of the mixed model.

    Term lists hold covariate names; the intercept is the explicit term
    ``"1"``.  Treatment blocks are multiplied by ``trt`` (and by ``avail``
    when ``gate_treatment_by_availability``).  With
    ``availability_interactions`` the main-effect block is repeated
    multiplied by ``avail``.  ``diagonal_G`` restricts the random-effect
    covariance to independent effects.
    """

    fixed_main: tuple[str, ...] = (INTERCEPT,)
    fixed_trt: tuple[str, ...] = ()
    random_main: tuple[str, ...] = (INTERCEPT,)
    random_trt: tuple[str, ...] = ()
    availability_interactions: bool = False
    gate_treatment_by_availability: bool = True
    diagonal_G: bool = False

    def __post_init__(self):
        for name in ("fixed_main", "fixed_trt", "random_main", "random_trt"):
            terms = tuple(str(t) for t in getattr(self, name))
            if len(set(terms)) != len(terms):
                raise SchemaError(f"{name}: repeated term")
            object.__setattr__(self, name, terms)

    def to_dict(self) -> dict:
        return {
            "fixed_main": list(self.fixed_main),
            "fixed_trt": list(self.fixed_trt),
            "random_main": list(self.random_main),
            "random_trt": list(self.random_trt),
            "availability_interactions": self.availability_interactions,
            "gate_treatment_by_availability": self.gate_treatment_by_availability,
            "diagonal_G": self.diagonal_G,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown ModelSpec keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("fixed_main", "fixed_trt", "random_main", "random_trt"):
            if key in kw:
                if isinstance(kw[key], str):
                    raise SchemaError(f"{key} must be a list of terms")
                kw[key] = tuple(str(t) for t in kw[key])
        return cls(**kw)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """Per-individual design matrices ``X_i`` (n_i x p), ``Z_i`` (n_i x q), outcomes ``y_i``."""

    X: tuple[np.ndarray, ...]
    Z: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]
    ids: tuple[str, ...] = ()
    diagonal_G: bool = False

    def __post_init__(self):
        object.__setattr__(self, "X", tuple(_frozen(np.asarray(x, dtype=float)) for x in self.X))
        object.__setattr__(self, "Z", tuple(_frozen(np.asarray(z, dtype=float)) for z in self.Z))
        object.__setattr__(self, "y", tuple(_frozen(np.asarray(v, dtype=float)) for v in self.y))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(len(self.X))))
        if not (len(self.X) == len(self.Z) == len(self.y) == len(self.ids)):
            raise ValidationError("X, Z, y and ids must have one entry per individual")
        p, q = len(self.fixed_names), len(self.random_names)
        for i, (x, z, v) in enumerate(zip(self.X, self.Z, self.y)):
            if x.ndim != 2 or x.shape[1] != p or z.ndim != 2 or z.shape[1] != q:
                raise ValidationError(f"individual {self.ids[i]!r}: design has wrong shape")
            if not (x.shape[0] == z.shape[0] == v.shape[0]):
                raise ValidationError(f"individual {self.ids[i]!r}: row counts differ")

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def p(self) -> int:
        return len(self.fixed_names)

    @property
    def q(self) -> int:
        return len(self.random_names)

    @cached_property
    def n_obs(self) -> int:
        return sum(len(v) for v in self.y)

    @cached_property
    def X_all(self) -> np.ndarray:
        return np.vstack(self.X)

    @cached_property
    def y_all(self) -> np.ndarray:
        return np.concatenate(self.y)

    @cached_property
    def cross_products(self) -> "CrossProducts":
        return CrossProducts.from_bundle(self)

    @cached_property
    def fingerprint(self) -> str:
        """Hash of the stacked fixed-effect design (used to check REML comparability)."""
        h = hashlib.sha1()
        h.update(repr(self.fixed_names).encode())
        h.update(np.ascontiguousarray(self.X_all).tobytes())
        return h.hexdigest()

    def subset(self, order: Sequence[int]) -> "DesignBundle":
        return DesignBundle(
            tuple(self.X[i] for i in order),
            tuple(self.Z[i] for i in order),
            tuple(self.y[i] for i in order),
            self.fixed_names,
            self.random_names,
            tuple(self.ids[i] for i in order),
            self.diagonal_G,
        )

    def with_outcomes(self, y: Iterable[np.ndarray]) -> "DesignBundle":
        return DesignBundle(
            self.X, self.Z, tuple(y), self.fixed_names, self.random_names, self.ids, self.diagonal_G
        )


@dataclass(frozen=True, eq=False)
class CrossProducts:
    """Sufficient statistics of the Gaussian likelihood.

    ``ZtZ`` is (n, q, q) and ``ZtXy`` is (n, q, p+1) with ``y`` as the last
    column.  The same information is also kept in triangular form: with
    ``R_i`` the R factor of ``[Z_i X_i y_i]``, ``Rzz`` (n, q, q) and ``Rzx``
    (n, q, p+1) are its leading rows and ``S`` sums the trailing blocks
    ``Rxx_i' Rxx_i``.
    """

    ZtZ: np.ndarray
    ZtXy: np.ndarray
    Rzz: np.ndarray
    Rzx: np.ndarray
    S: np.ndarray
    n_obs: int

    @classmethod
    def from_bundle(cls, b: DesignBundle) -> "CrossProducts":
        n, p, q = b.n, b.p, b.q
        k = q + p + 1
        ZtZ = np.empty((n, q, q))
        ZtXy = np.empty((n, q, p + 1))
        Rzz = np.zeros((n, q, q))
        Rzx = np.zeros((n, q, p + 1))
        S = np.zeros((p + 1, p + 1))
        for i, (x, z, v) in enumerate(zip(b.X, b.Z, b.y)):
            zxy = np.column_stack([z, x, v])
            ZtZ[i] = z.T @ z
            ZtXy[i] = z.T @ zxy[:, q:]
            R = np.zeros((k, k))
            r = np.linalg.qr(zxy, mode="r")
            R[: r.shape[0]] = r
            Rzz[i] = R[:q, :q]
            Rzx[i] = R[:q, q:]
            S += R[q:, q:].T @ R[q:, q:]
        return cls(ZtZ, ZtXy, Rzz, Rzx, 0.5 * (S + S.T), b.n_obs)


def _term_value(term: str, s: IndividualSeries, index: Mapping[str, int]) -> np.ndarray:
    if term == INTERCEPT:
        return np.ones(len(s))
    return s.covariates[:, index[term]]


def _label(prefix: str, term: str) -> str:
    if term == INTERCEPT:
        return prefix or "(Intercept)"
    return f"{prefix}:{term}" if prefix else term


def build_design(data: LongitudinalDataset, spec: ModelSpec) -> DesignBundle:
    """Turn a dataset plus model specification into per-individual matrices.

    Row layout of ``X_i``: main-effect terms, then (optionally) the same terms
    times availability, then treatment terms times ``trt * avail``.  Row layout
    of ``Z_i``: random main terms, then random treatment terms times
    ``trt * avail``.  Without availability gating the ``avail`` factor is 1.
    """
    index = {name: j for j, name in enumerate(data.covariate_names)}
    for block in ("fixed_main", "fixed_trt", "random_main", "random_trt"):
        for term in getattr(spec, block):
            if term != INTERCEPT and term not in index:
                raise SchemaError(f"{block}: unknown term {term!r}")
    if not data.has_treatment and (spec.fixed_trt or spec.random_trt):
        raise SchemaError("dataset has no treatment column; fixed_trt and random_trt must be empty")
    if not spec.random_main and not spec.random_trt:
        raise SchemaError(
            "no random-effect terms (q = 0): this is an ordinary least squares model, "
            "fit it with numpy.linalg.lstsq instead"
        )
    if not spec.fixed_main and not spec.fixed_trt:
        raise SchemaError("no fixed-effect terms")

    trt_prefix = "trt:avail" if (spec.gate_treatment_by_availability and data.has_availability) else "trt"
    fixed_names = [_label("", t) for t in spec.fixed_main]
    if spec.availability_interactions:
        fixed_names += [_label("avail", t) for t in spec.fixed_main]
    fixed_names += [_label(trt_prefix, t) for t in spec.fixed_trt]
    random_names = [_label("", t) for t in spec.random_main]
    random_names += [_label(trt_prefix, t) for t in spec.random_trt]

    Xs, Zs, ys = [], [], []
    for s in data.individuals:
        avail = s.avail.astype(float)
        gate = s.trt * (avail if spec.gate_treatment_by_availability else 1.0)
        xcols = [_term_value(t, s, index) for t in spec.fixed_main]
        if spec.availability_interactions:
            xcols += [avail * _term_value(t, s, index) for t in spec.fixed_main]
        xcols += [gate * _term_value(t, s, index) for t in spec.fixed_trt]
        zcols = [_term_value(t, s, index) for t in spec.random_main]
        zcols += [gate * _term_value(t, s, index) for t in spec.random_trt]
        Xs.append(np.column_stack(xcols))
        Zs.append(np.column_stack(zcols))
        ys.append(s.outcome)
    return DesignBundle(
        tuple(Xs),
        tuple(Zs),
        tuple(ys),
        tuple(fixed_names),
        tuple(random_names),
        tuple(s.id for s in data.individuals),
        spec.diagonal_G,
    )
