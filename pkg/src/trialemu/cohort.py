"""Cohort data model, CSV ingestion, eligibility filtering, horizon labels.

A cohort couples an immutable covariate schema with a list of patients.
Covariates are stored as a dense float matrix; binary covariates must be
encoded 0/1 upstream, and missing values are rejected at ingestion.
"""

from __future__ import annotations

import csv
import operator
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import CohortParseError, ConfigError, IntegrityError, SchemaError

RESERVED_COLUMNS = ("id", "treatment", "event", "time")

_COMPARATORS = {
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    ">=": operator.ge,
    ">": operator.gt,
}


@dataclass(frozen=True)
class CovariateSchema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]  # "binary" | "continuous"
    units: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.kinds) == len(self.units)):
            raise SchemaError("schema fields must have equal length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("covariate names must be unique")
        for name in self.names:
            if name in RESERVED_COLUMNS:
                raise SchemaError(f"covariate name {name!r} is reserved")
        for kind in self.kinds:
            if kind not in ("binary", "continuous"):
                raise SchemaError(f"unknown covariate kind {kind!r}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}") from None


@dataclass(frozen=True)
class Patient:
    id: str
    covariates: tuple[float, ...]
    treatment: int
    event: int
    time: float

    def __post_init__(self):
        if self.treatment not in (0, 1):
            raise IntegrityError(f"patient {self.id}: treatment must be 0/1")
        if self.event not in (0, 1):
            raise IntegrityError(f"patient {self.id}: event must be 0/1")
        if self.time < 0:
            raise IntegrityError(f"patient {self.id}: time must be >= 0")


class Cohort:
    """Immutable collection of patients sharing one covariate schema."""

    def __init__(self, schema: CovariateSchema, patients: list[Patient]):
        seen = set()
        for p in patients:
            if len(p.covariates) != len(schema):
                raise SchemaError(
                    f"patient {p.id}: expected {len(schema)} covariates, "
                    f"got {len(p.covariates)}"
                )
            if p.id in seen:
                raise IntegrityError(f"duplicate patient id {p.id!r}")
            seen.add(p.id)
        self.schema = schema
        self.patients = tuple(patients)

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.patients]

    def covariate_matrix(self) -> np.ndarray:
        if not self.patients:
            return np.empty((0, len(self.schema)))
        return np.array([p.covariates for p in self.patients], dtype=float)

    def treatments(self) -> np.ndarray:
        return np.array([p.treatment for p in self.patients], dtype=int)

    def events(self) -> np.ndarray:
        return np.array([p.event for p in self.patients], dtype=int)

    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.patients], dtype=float)

    def subset(self, ids) -> "Cohort":
        wanted = set(ids)
        missing = wanted - set(self.ids)
        if missing:
            raise IntegrityError(f"unknown patient ids: {sorted(missing)}")
        return Cohort(self.schema, [p for p in self.patients if p.id in wanted])

    def by_id(self, pid: str) -> Patient:
        for p in self.patients:
            if p.id == pid:
                return p
        raise IntegrityError(f"unknown patient id {pid!r}")


@dataclass(frozen=True)
class TrialTarget:
    """Emulation goalposts: per-arm event-free rates and covariate means."""

    horizon_months: float
    mu0: float
    mu1: float
    covariate_targets: dict = field(default_factory=dict)  # name -> (arm0, arm1)
    tolerance_outcome: float = 0.02
    tolerance_covariate: float = 0.03

    def __post_init__(self):
        if self.horizon_months <= 0:
            raise ConfigError("horizon_months must be positive")
        if not (0.0 <= self.mu0 <= 1.0 and 0.0 <= self.mu1 <= 1.0):
            raise ConfigError("mu0/mu1 must be probabilities")

    def validate_against(self, schema: CovariateSchema):
        for name in self.covariate_targets:
            if name not in schema.names:
                raise SchemaError(f"covariate target {name!r} not in schema")


@dataclass(frozen=True)
class EligibilityRule:
    field: str
    op: str  # <, <=, =, >=, >, in
    value: object

    def __post_init__(self):
        if self.op not in _COMPARATORS and self.op != "in":
            raise ConfigError(f"unknown comparator {self.op!r}")

    def describe(self) -> str:
        return f"{self.field} {self.op} {self.value}"

    def matches(self, patient: Patient, schema: CovariateSchema) -> bool:
        if self.field == "time":
            val = patient.time
        elif self.field in schema.names:
            val = patient.covariates[schema.index(self.field)]
        else:
            raise SchemaError(f"eligibility rule references unknown field {self.field!r}")
        if self.op == "in":
            return val in set(self.value)
        return _COMPARATORS[self.op](val, self.value)


@dataclass(frozen=True)
class EligibilityResult:
    cohort: Cohort
    exclusions: dict  # rule description -> count of patients failing it


def load_cohort(path, schema: CovariateSchema) -> Cohort:
    """Parse a cohort CSV (id,treatment,event,time,<covariates>) against a schema."""
    expected = list(RESERVED_COLUMNS) + list(schema.names)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError(f"{path}: empty file, expected header row") from None
        for col in expected:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        col_idx = {c: header.index(c) for c in expected}
        patients = []
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue

            def cell(col, _row=row, _n=rownum):
                raw = _row[col_idx[col]]
                try:
                    return float(raw)
                except ValueError:
                    raise CohortParseError(
                        f"{path}: row {_n}: non-numeric value {raw!r} in column {col!r}"
                    ) from None

            covs = []
            for name, kind in zip(schema.names, schema.kinds):
                v = cell(name)
                if kind == "binary" and v not in (0.0, 1.0):
                    raise CohortParseError(
                        f"{path}: row {rownum}: binary covariate {name!r} "
                        f"must be 0/1, got {v}"
                    )
                covs.append(v)
            patients.append(
                Patient(
                    id=row[col_idx["id"]],
                    covariates=tuple(covs),
                    treatment=int(cell("treatment")),
                    event=int(cell("event")),
                    time=cell("time"),
                )
            )
    return Cohort(schema, patients)


def save_cohort(cohort: Cohort, path) -> None:
    header = list(RESERVED_COLUMNS) + list(cohort.schema.names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in cohort:
            writer.writerow(
                [p.id, p.treatment, p.event, repr(p.time)]
                + [repr(v) for v in p.covariates]
            )


def apply_eligibility(cohort: Cohort, rules: list[EligibilityRule]) -> EligibilityResult:
    """Keep patients satisfying the conjunction of all rules.

    Exclusion counts are per rule: a patient failing several rules counts
    once under each rule it fails.
    """
    exclusions = {rule.describe(): 0 for rule in rules}
    kept = []
    for p in cohort:
        ok = True
        for rule in rules:
            if not rule.matches(p, cohort.schema):
                exclusions[rule.describe()] += 1
                ok = False
        if ok:
            kept.append(p)
    return EligibilityResult(Cohort(cohort.schema, kept), exclusions)


@dataclass(frozen=True)
class HorizonLabels:
    """Event-by-horizon labels; censored-before-horizon patients are excluded."""

    ids: tuple[str, ...]
    labels: np.ndarray  # 1 = event by horizon, 0 = event-free through horizon
    excluded_ids: tuple[str, ...]


def binarize_at_horizon(cohort: Cohort, horizon: float) -> HorizonLabels:
    if horizon <= 0:
        raise ConfigError("horizon must be positive")
    ids, labels, excluded = [], [], []
    for p in cohort:
        if p.event == 1 and p.time <= horizon:
            ids.append(p.id)
            labels.append(1)
        elif p.time > horizon:
            ids.append(p.id)
            labels.append(0)
        else:  # censored before horizon: label unknowable without IPCW
            excluded.append(p.id)
    return HorizonLabels(tuple(ids), np.array(labels, dtype=int), tuple(excluded))


def load_trial_config(path, schema: CovariateSchema):
    """Read the declarative trial config: TrialTarget plus eligibility rules."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    try:
        cov_targets = {}
        for name, arms in (raw.get("covariate_targets") or {}).items():
            cov_targets[name] = (float(arms["arm0"]), float(arms["arm1"]))
        target = TrialTarget(
            horizon_months=float(raw["horizon_months"]),
            mu0=float(raw["mu0"]),
            mu1=float(raw["mu1"]),
            covariate_targets=cov_targets,
            tolerance_outcome=float(raw.get("tolerance_outcome", 0.02)),
            tolerance_covariate=float(raw.get("tolerance_covariate", 0.03)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc}") from None
    rules = []
    for entry in raw.get("eligibility") or []:
        value = entry["value"]
        rules.append(EligibilityRule(field=entry["field"], op=entry["op"], value=value))
    target.validate_against(schema)
    for rule in rules:
        if rule.field != "time" and rule.field not in schema.names:
            raise SchemaError(f"eligibility rule references unknown field {rule.field!r}")
    return target, rules


def save_trial_config(target: TrialTarget, rules: list[EligibilityRule], path) -> None:
    doc = {
        "horizon_months": float(target.horizon_months),
        "mu0": float(target.mu0),
        "mu1": float(target.mu1),
        "tolerance_outcome": float(target.tolerance_outcome),
        "tolerance_covariate": float(target.tolerance_covariate),
        "covariate_targets": {
            name: {"arm0": float(a0), "arm1": float(a1)}
            for name, (a0, a1) in sorted(target.covariate_targets.items())
        },
        "eligibility": [
            {"field": r.field, "op": r.op, "value": r.value} for r in rules
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
