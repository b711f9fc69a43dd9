"""Frozen subject list (covariates, observed arms, responses) and its file formats.

A :class:`Cohort` is what a re-randomization test conditions on: subject
order, stratification levels and responses never change after loading.
Factor levels come from a declared schema rather than from the data, so a
level that no subject happens to have still owns a count slot during
minimization.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CohortError",
    "StratumFactor",
    "Outcome",
    "Subject",
    "Schema",
    "Cohort",
    "OUTCOME_KINDS",
    "load_schema",
    "save_schema",
    "load_cohort",
    "save_cohort",
    "cohort_to_csv",
    "validate_for_test",
    "fnv1a64",
    "covariate_fingerprint",
]

OUTCOME_KINDS = ("continuous", "binary", "survival")

_REQUIRED_OUTCOME = {
    "wald_linear": "continuous",
    "wald_logistic": "binary",
    "stratified_logrank": "survival",
}


class CohortError(ValueError):
    """Invalid cohort file, schema or cohort contents."""


@dataclass(frozen=True)
class StratumFactor:
    name: str
    levels: tuple[str, ...]
    weight: float = 1.0
    level_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if len(self.levels) < 2:
            raise CohortError(f"factor {self.name!r} needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise CohortError(f"factor {self.name!r} has duplicate level labels")
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise CohortError(f"factor {self.name!r} weight must be a nonnegative real")
        if self.level_probs is not None:
            probs = tuple(float(p) for p in self.level_probs)
            object.__setattr__(self, "level_probs", probs)
            if len(probs) != len(self.levels):
                raise CohortError(f"factor {self.name!r}: level_probs length mismatch")
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
                raise CohortError(f"factor {self.name!r}: level_probs must be nonnegative and sum to 1")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def index(self, label: str) -> int:
        try:
            return self.levels.index(label)
        except ValueError:
            raise KeyError(label) from None


@dataclass(frozen=True)
class Outcome:
    kind: str
    value: float
    event: bool | None = None

    def __post_init__(self):
        if self.kind not in OUTCOME_KINDS:
            raise CohortError(f"unknown outcome kind {self.kind!r}")
        v = float(self.value)
        object.__setattr__(self, "value", v)
        if not math.isfinite(v):
            raise CohortError("outcome value must be finite")
        if self.kind == "binary" and v not in (0.0, 1.0):
            raise CohortError(f"binary outcome must be 0 or 1, got {v}")
        if self.kind == "survival":
            if v <= 0:
                raise CohortError(f"survival time must be positive, got {v}")
            if self.event is None:
                raise CohortError("survival outcome requires an event indicator")
            object.__setattr__(self, "event", bool(self.event))
        elif self.event is not None:
            raise CohortError("event indicator only applies to survival outcomes")


@dataclass(frozen=True)
class Subject:
    id: str
    factor_levels: tuple[int, ...]
    response: Outcome | None = None
    arm: int | None = None


@dataclass(frozen=True)
class Schema:
    """Factor and arm declarations shared by a cohort file and its store."""

    factors: tuple[StratumFactor, ...]
    arm_labels: tuple[str, ...] = ("control", "treatment")
    arm_ratio: tuple[int, ...] = (1, 1)
    outcome: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "arm_labels", tuple(str(a) for a in self.arm_labels))
        object.__setattr__(self, "arm_ratio", tuple(int(r) for r in self.arm_ratio))
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise CohortError("duplicate factor names in schema")
        if len(self.arm_labels) < 2 or len(set(self.arm_labels)) != len(self.arm_labels):
            raise CohortError("need at least 2 distinct arm labels")
        if len(self.arm_ratio) != len(self.arm_labels) or min(self.arm_ratio) < 1:
            raise CohortError("arm_ratio must give a positive integer per arm")
        if self.outcome is not None and self.outcome not in OUTCOME_KINDS:
            raise CohortError(f"unknown outcome kind {self.outcome!r}")

    def to_dict(self) -> dict:
        d = {
            "factors": [
                {"name": f.name, "levels": list(f.levels), "weight": f.weight}
                | ({"level_probs": list(f.level_probs)} if f.level_probs is not None else {})
                for f in self.factors
            ],
            "arms": {"labels": list(self.arm_labels), "ratio": list(self.arm_ratio)},
        }
        if self.outcome is not None:
            d["outcome"] = self.outcome
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            factors = tuple(
                StratumFactor(
                    name=str(f["name"]),
                    levels=tuple(str(v) for v in f["levels"]),
                    weight=float(f.get("weight", 1.0)),
                    level_probs=f.get("level_probs"),
                )
                for f in d["factors"]
            )
        except (KeyError, TypeError) as exc:
            raise CohortError(f"malformed factor declaration: {exc}") from None
        arms = d.get("arms", {})
        return cls(
            factors=factors,
            arm_labels=tuple(arms.get("labels", ("control", "treatment"))),
            arm_ratio=tuple(arms.get("ratio", (1,) * len(arms.get("labels", (0, 0))))),
            outcome=d.get("outcome"),
        )


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_dict(json.load(fh))


def save_schema(schema: Schema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Cohort:
    factors: tuple[StratumFactor, ...]
    subjects: tuple[Subject, ...]
    arm_labels: tuple[str, ...] = ("control", "treatment")
    arm_ratio: tuple[int, ...] = (1, 1)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "arm_labels", tuple(self.arm_labels))
        object.__setattr__(self, "arm_ratio", tuple(int(r) for r in self.arm_ratio))
        # Schema validates arms
        Schema(self.factors, self.arm_labels, self.arm_ratio)
        seen = set()
        kinds = set()
        nf = len(self.factors)
        for s in self.subjects:
            if s.id in seen:
                raise CohortError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
            if len(s.factor_levels) != nf:
                raise CohortError(f"subject {s.id!r}: expected {nf} factor levels")
            for f, lv in zip(self.factors, s.factor_levels):
                if not 0 <= lv < f.n_levels:
                    raise CohortError(f"subject {s.id!r}: level index {lv} invalid for {f.name!r}")
            if s.arm is not None and not 0 <= s.arm < self.n_arms:
                raise CohortError(f"subject {s.id!r}: arm index {s.arm} invalid")
            if s.response is not None:
                kinds.add(s.response.kind)
        if len(kinds) > 1:
            raise CohortError(f"mixed outcome kinds in cohort: {sorted(kinds)}")

    @property
    def schema(self) -> Schema:
        return Schema(self.factors, self.arm_labels, self.arm_ratio, self.outcome_kind)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_arms(self) -> int:
        return len(self.arm_labels)

    @property
    def outcome_kind(self) -> str | None:
        for s in self.subjects:
            if s.response is not None:
                return s.response.kind
        return None

    def factor_index(self, name: str) -> int:
        for i, f in enumerate(self.factors):
            if f.name == name:
                return i
        raise KeyError(f"unknown factor {name!r}")

    def levels_matrix(self) -> np.ndarray:
        """(n_subjects, n_factors) int64 array of level indices (read-only)."""
        m = self._cache.get("levels")
        if m is None:
            m = np.array([s.factor_levels for s in self.subjects], dtype=np.int64).reshape(
                self.n_subjects, len(self.factors)
            )
            m.setflags(write=False)
            self._cache["levels"] = m
        return m

    def observed_arms(self) -> np.ndarray | None:
        arms = [s.arm for s in self.subjects]
        if any(a is None for a in arms):
            return None
        return np.array(arms, dtype=np.uint8)

    def response_arrays(self) -> tuple[np.ndarray, np.ndarray | None]:
        """Response values and (survival only) event indicators."""
        if any(s.response is None for s in self.subjects):
            raise CohortError("cohort has missing responses")
        y = np.array([s.response.value for s in self.subjects], dtype=np.float64)
        if self.outcome_kind == "survival":
            ev = np.array([s.response.event for s in self.subjects], dtype=bool)
            return y, ev
        return y, None

    def with_arms(self, arms: Sequence[int]) -> "Cohort":
        if len(arms) != self.n_subjects:
            raise CohortError("assignment length differs from cohort size")
        subs = tuple(
            Subject(s.id, s.factor_levels, s.response, int(a)) for s, a in zip(self.subjects, arms)
        )
        return Cohort(self.factors, subs, self.arm_labels, self.arm_ratio)

    def with_responses(self, responses: Sequence[Outcome | None]) -> "Cohort":
        if len(responses) != self.n_subjects:
            raise CohortError("response count differs from cohort size")
        subs = tuple(
            Subject(s.id, s.factor_levels, r, s.arm) for s, r in zip(self.subjects, responses)
        )
        return Cohort(self.factors, subs, self.arm_labels, self.arm_ratio)


def _format_real(x: float) -> str:
    return repr(float(x))


def _header(cohort: Cohort, kind: str | None, include_arm: bool) -> list[str]:
    cols = ["id"] + [f.name for f in cohort.factors]
    if include_arm:
        cols.append("arm")
    if kind == "survival":
        cols += ["time", "event"]
    elif kind is not None:
        cols.append("y")
    return cols


def cohort_to_csv(cohort: Cohort, covariates_only: bool = False) -> str:
    """Canonical CSV text.  ``covariates_only`` drops arms and responses."""
    kind = None if covariates_only else cohort.outcome_kind
    include_arm = (not covariates_only) and any(s.arm is not None for s in cohort.subjects)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(cohort, kind, include_arm))
    for s in cohort.subjects:
        row = [s.id] + [f.levels[lv] for f, lv in zip(cohort.factors, s.factor_levels)]
        if include_arm:
            row.append("" if s.arm is None else cohort.arm_labels[s.arm])
        if kind == "survival":
            if s.response is None:
                row += ["", ""]
            else:
                row += [_format_real(s.response.value), "1" if s.response.event else "0"]
        elif kind is not None:
            if s.response is None:
                row.append("")
            elif kind == "binary":
                row.append(str(int(s.response.value)))
            else:
                row.append(_format_real(s.response.value))
        w.writerow(row)
    return buf.getvalue()


def save_cohort(cohort: Cohort, path) -> None:
    Path(path).write_text(cohort_to_csv(cohort), encoding="utf-8")


def _infer_kind(columns: Iterable[str], values: list[str]) -> str | None:
    cols = set(columns)
    if "time" in cols:
        return "survival"
    if "y" not in cols:
        return None
    present = [v for v in values if v != ""]
    if present and all(v in ("0", "1", "0.0", "1.0") for v in present):
        return "binary"
    return "continuous"


def load_cohort(path, schema: Schema, outcome: str | None = None) -> Cohort:
    """Read a cohort CSV, mapping factor labels onto the schema's levels.

    The outcome kind is ``outcome`` if given, else the schema's, else inferred
    from the columns (``time,event`` means survival; a 0/1 ``y`` means binary).
    Rows are numbered from 1, counting data rows only.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CohortError(f"{path}: empty file")
        columns = [c.strip() for c in reader.fieldnames]
        reader.fieldnames = columns
        rows = list(reader)

    if "id" not in columns:
        raise CohortError(f"{path}: missing column 'id'")
    for f in schema.factors:
        if f.name not in columns:
            raise CohortError(f"{path}: missing factor column {f.name!r}")
    if ("time" in columns) != ("event" in columns):
        raise CohortError(f"{path}: survival data needs both 'time' and 'event' columns")

    kind = outcome or schema.outcome
    if kind is None:
        kind = _infer_kind(columns, [r.get("y", "") or "" for r in rows])
    if kind == "survival" and "time" not in columns:
        raise CohortError(f"{path}: survival outcome requires columns 'time' and 'event'")
    if kind in ("continuous", "binary") and "y" not in columns:
        raise CohortError(f"{path}: {kind} outcome requires column 'y'")

    has_arm = "arm" in columns
    subjects = []
    seen: dict[str, int] = {}
    for i, row in enumerate(rows, start=1):
        sid = (row["id"] or "").strip()
        if not sid:
            raise CohortError(f"row {i}, column 'id': empty subject id")
        if sid in seen:
            raise CohortError(f"row {i}, column 'id': duplicate subject id {sid!r} (first at row {seen[sid]})")
        seen[sid] = i
        levels = []
        for f in schema.factors:
            label = (row[f.name] or "").strip()
            try:
                levels.append(f.index(label))
            except KeyError:
                raise CohortError(
                    f"row {i}, column {f.name!r}: unknown level {label!r} (declared: {', '.join(f.levels)})"
                ) from None
        arm = None
        if has_arm:
            label = (row["arm"] or "").strip()
            if label:
                if label not in schema.arm_labels:
                    raise CohortError(f"row {i}, column 'arm': unknown arm {label!r}")
                arm = schema.arm_labels.index(label)
        response = None
        try:
            if kind == "survival":
                t, e = (row["time"] or "").strip(), (row["event"] or "").strip()
                if t or e:
                    if e not in ("0", "1"):
                        raise CohortError(f"row {i}, column 'event': expected 0 or 1, got {e!r}")
                    response = Outcome("survival", float(t), e == "1")
            elif kind is not None:
                v = (row["y"] or "").strip()
                if v:
                    response = Outcome(kind, float(v))
        except CohortError as exc:
            if str(exc).startswith("row "):
                raise
            col = "time" if kind == "survival" else "y"
            raise CohortError(f"row {i}, column {col!r}: {exc}") from None
        except ValueError:
            col = "time" if kind == "survival" else "y"
            raise CohortError(f"row {i}, column {col!r}: not a number") from None
        subjects.append(Subject(sid, tuple(levels), response, arm))

    return Cohort(schema.factors, tuple(subjects), schema.arm_labels, schema.arm_ratio)


def validate_for_test(cohort: Cohort, stat_kind) -> None:
    """Raise :class:`CohortError` unless every subject carries the needed response."""
    name = getattr(stat_kind, "name", stat_kind)
    need = _REQUIRED_OUTCOME.get(name)
    if need is None:
        raise CohortError(f"unknown statistic {name!r}")
    missing = [s.id for s in cohort.subjects if s.response is None]
    if missing:
        raise CohortError(f"{need} outcome required; missing response for subject(s): {', '.join(missing)}")
    wrong = [s.id for s in cohort.subjects if s.response.kind != need]
    if wrong:
        raise CohortError(f"{need} outcome required; subject(s) with {cohort.outcome_kind} outcome: {', '.join(wrong)}")


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def covariate_fingerprint(cohort: Cohort) -> str:
    """64-bit FNV-1a over canonical covariate CSV plus factor/arm declarations.

    Responses and observed arms are excluded, so one store serves every
    endpoint measured on the same subjects.
    """
    schema = Schema(cohort.factors, cohort.arm_labels, cohort.arm_ratio)
    payload = cohort_to_csv(cohort, covariates_only=True) + json.dumps(schema.to_dict(), sort_keys=True)
    return f"{fnv1a64(payload.encode('utf-8')):016x}"
