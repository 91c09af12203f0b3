"""Study subjects, CSV ingestion, eligibility filtering and sibling imputation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from dataturnover.config import format_list, parse_bool, read_config, split_list

log = logging.getLogger(__name__)

SUBGROUPS = ("NHS", "HS")
RELATIONS = ("father", "other", "none")
COVARIATE_KINDS = ("continuous", "binary", "categorical")
OUTCOME_KINDS = ("continuous", "binary")

# Subject attributes that can be read from a CSV column.
SUBJECT_FIELDS = (
    "id",
    "subgroup",
    "treated",
    "sibling_ids",
    "completed_phone",
    "completed_mail",
    "reported_drinkers",
    "reported_relation",
)


class CohortError(ValueError):
    pass


class SchemaError(CohortError):
    pass


class CohortFormatError(CohortError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str
    levels: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise SchemaError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise SchemaError(f"categorical covariate {self.name!r} needs declared levels")

    def check(self, value: float | None) -> None:
        if value is None:
            return
        if self.kind == "binary" and value not in (0.0, 1.0):
            raise CohortError(f"binary covariate {self.name!r} has value {value!r}")
        if self.kind == "categorical" and value not in self.levels:
            raise CohortError(f"covariate {self.name!r}: {value!r} not among levels {self.levels}")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str
    value: float | None = None


@dataclass(frozen=True)
class OutcomeSpec:
    """Registry entry. ``prespecified`` is False for candidate novel outcomes."""

    name: str
    kind: str
    codes: tuple[str, ...] = ()
    prespecified: bool = True

    def __post_init__(self):
        if self.kind not in OUTCOME_KINDS:
            raise SchemaError(f"outcome {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Subject:
    id: str
    subgroup: str | None
    treated: bool | None
    covariates: tuple[Covariate, ...] = ()
    outcomes: Mapping[str, float | None] = field(default_factory=dict)
    sibling_ids: tuple[str, ...] = ()
    completed_phone: bool = True
    completed_mail: bool = True
    reported_drinkers: int | None = None
    reported_relation: str | None = None

    def covariate(self, name: str) -> float | None:
        for c in self.covariates:
            if c.name == name:
                return c.value
        raise KeyError(name)

    def with_covariate(self, name: str, value: float | None) -> "Subject":
        covs = tuple(replace(c, value=value) if c.name == name else c for c in self.covariates)
        return replace(self, covariates=covs)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[Subject, ...]
    covariate_specs: tuple[CovariateSpec, ...] = ()
    outcome_registry: tuple[OutcomeSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_specs", tuple(self.covariate_specs))
        object.__setattr__(self, "outcome_registry", tuple(self.outcome_registry))
        names = [o.name for o in self.outcome_registry]
        if len(set(names)) != len(names):
            raise CohortError("outcome registry names must be unique")
        specs = {c.name: c for c in self.covariate_specs}
        seen: set[str] = set()
        known = set(names)
        for s in self.subjects:
            if s.id in seen:
                raise CohortError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
            if s.subgroup is not None and s.subgroup not in SUBGROUPS:
                raise CohortError(f"subject {s.id}: unknown subgroup {s.subgroup!r}")
            if s.reported_relation is not None and s.reported_relation not in RELATIONS:
                raise CohortError(f"subject {s.id}: unknown relation {s.reported_relation!r}")
            for c in s.covariates:
                spec = specs.get(c.name)
                if spec is None:
                    raise CohortError(f"subject {s.id}: undeclared covariate {c.name!r}")
                spec.check(c.value)
            extra = set(s.outcomes) - known
            if extra:
                raise CohortError(f"subject {s.id}: outcomes {sorted(extra)} not in registry")

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def by_id(self) -> dict[str, Subject]:
        return {s.id: s for s in self.subjects}

    def covariate_spec(self, name: str) -> CovariateSpec:
        for c in self.covariate_specs:
            if c.name == name:
                return c
        raise KeyError(name)

    def outcome_spec(self, name: str) -> OutcomeSpec:
        for o in self.outcome_registry:
            if o.name == name:
                return o
        raise KeyError(name)

    def prespecified_outcomes(self) -> list[str]:
        return [o.name for o in self.outcome_registry if o.prespecified]

    def subgroup(self, label: str) -> "Cohort":
        return replace(self, subjects=tuple(s for s in self.subjects if s.subgroup == label))

    def with_subjects(self, subjects: Iterable[Subject]) -> "Cohort":
        return replace(self, subjects=tuple(subjects))

    def counts(self) -> dict[str, dict[str, int]]:
        """Control/treated counts per subgroup."""
        out = {g: {"control": 0, "treated": 0} for g in SUBGROUPS}
        for s in self.subjects:
            if s.subgroup in out and s.treated is not None:
                out[s.subgroup]["treated" if s.treated else "control"] += 1
        return out


# ---------------------------------------------------------------------------
# Schema (column mapping config)


@dataclass(frozen=True)
class Schema:
    fields: Mapping[str, str]
    covariates: tuple[CovariateSpec, ...]
    outcomes: tuple[OutcomeSpec, ...]
    subgroup_codes: Mapping[str, str] = field(default_factory=lambda: {"NHS": "NHS", "HS": "HS"})
    missing_codes: tuple[str, ...] = ()

    @classmethod
    def from_config(cls, path: str | os.PathLike | None = None, text: str | None = None) -> "Schema":
        cfg = read_config(path, text=text)
        fields_: dict[str, str] = {}
        if cfg.has_section("fields"):
            for key, col in cfg.items("fields"):
                if key not in SUBJECT_FIELDS:
                    raise SchemaError(f"unknown subject field {key!r} in [fields]")
                fields_[key] = col
        if "id" not in fields_:
            raise SchemaError("schema must map the 'id' field")
        covs = []
        if cfg.has_section("covariates"):
            for name, decl in cfg.items("covariates"):
                covs.append(_parse_covariate_decl(name, decl))
        outs = []
        for section, pre in (("outcomes", True), ("novel", False)):
            if cfg.has_section(section):
                for name, decl in cfg.items(section):
                    kind, _, codes = decl.partition("|")
                    outs.append(OutcomeSpec(name, kind.strip(), tuple(split_list(codes)), pre))
        codes = {"NHS": "NHS", "HS": "HS"}
        if cfg.has_section("subgroups"):
            codes = {}
            for label, raw in cfg.items("subgroups"):
                if label not in SUBGROUPS:
                    raise SchemaError(f"unknown subgroup label {label!r}")
                codes[label] = raw
        missing: tuple[str, ...] = ()
        if cfg.has_section("missing"):
            missing = tuple(split_list(cfg.get("missing", "codes", fallback="")))
        return cls(fields_, tuple(covs), tuple(outs), codes, missing)

    def to_config(self) -> str:
        lines = ["[fields]"]
        lines += [f"{k} = {v}" for k, v in self.fields.items()]
        lines += ["", "[subgroups]"]
        lines += [f"{k} = {v}" for k, v in self.subgroup_codes.items()]
        lines += ["", "[covariates]"]
        for c in self.covariates:
            decl = c.kind
            if c.kind == "categorical":
                decl += ": " + format_list(_fmt(v) for v in c.levels)
            lines.append(f"{c.name} = {decl}")
        for section, pre in (("outcomes", True), ("novel", False)):
            group = [o for o in self.outcomes if o.prespecified == pre]
            if group:
                lines += ["", f"[{section}]"]
                for o in group:
                    decl = o.kind + (" | " + format_list(o.codes) if o.codes else "")
                    lines.append(f"{o.name} = {decl}")
        if self.missing_codes:
            lines += ["", "[missing]", "codes = " + format_list(self.missing_codes)]
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_config())

    @classmethod
    def for_cohort(cls, cohort: Cohort) -> "Schema":
        return cls(
            fields={f: f for f in SUBJECT_FIELDS},
            covariates=cohort.covariate_specs,
            outcomes=cohort.outcome_registry,
        )

    def columns(self) -> list[str]:
        return list(self.fields.values()) + [c.name for c in self.covariates] + [o.name for o in self.outcomes]


def _parse_covariate_decl(name: str, decl: str) -> CovariateSpec:
    kind, _, levels = decl.partition(":")
    kind = kind.strip()
    try:
        lv = tuple(float(v) for v in split_list(levels))
    except ValueError as exc:
        raise SchemaError(f"covariate {name!r}: bad levels {levels!r}") from exc
    return CovariateSpec(name, kind, lv)


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


# ---------------------------------------------------------------------------
# CSV ingestion


def ingest_csv(path: str | os.PathLike, schema: Schema) -> Cohort:
    """Read a UTF-8 CSV with a header row into a :class:`Cohort`.

    Empty cells and the schema's sentinel codes become absent values.
    """
    missing = set(schema.missing_codes) | {""}
    code_to_label = {v: k for k, v in schema.subgroup_codes.items()}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError("empty file (header row required)", 1) from None
        index = {col: i for i, col in enumerate(header)}
        for col in schema.columns():
            if col not in index:
                raise SchemaError(f"schema references column {col!r} which is not in the file")
        subjects = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"expected {len(header)} cells, found {len(row)}", lineno)

            def cell(col: str) -> str | None:
                raw = row[index[col]].strip()
                return None if raw in missing else raw

            try:
                subjects.append(_subject_from_row(cell, schema, code_to_label))
            except (ValueError, CohortError) as exc:
                raise CohortFormatError(str(exc), lineno) from exc
    try:
        return Cohort(tuple(subjects), schema.covariates, schema.outcomes)
    except CohortError as exc:
        raise CohortFormatError(str(exc)) from exc


def _subject_from_row(cell, schema: Schema, code_to_label: Mapping[str, str]) -> Subject:
    f = schema.fields

    def get(name: str) -> str | None:
        return cell(f[name]) if name in f else None

    sid = get("id")
    if sid is None:
        raise ValueError("missing subject id")
    raw_group = get("subgroup")
    subgroup = None
    if raw_group is not None:
        if raw_group not in code_to_label:
            raise ValueError(f"unknown subgroup code {raw_group!r}")
        subgroup = code_to_label[raw_group]
    treated = get("treated")
    siblings = get("sibling_ids")
    phone, mail = get("completed_phone"), get("completed_mail")
    drinkers = get("reported_drinkers")
    relation = get("reported_relation")
    if relation is not None and relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    covs = []
    for spec in schema.covariates:
        raw = cell(spec.name)
        value = None if raw is None else float(raw)
        spec.check(value)
        covs.append(Covariate(spec.name, spec.kind, value))
    outcomes = {}
    for o in schema.outcomes:
        raw = cell(o.name)
        outcomes[o.name] = None if raw is None else float(raw)
    return Subject(
        id=sid,
        subgroup=subgroup,
        treated=None if treated is None else parse_bool(treated),
        covariates=tuple(covs),
        outcomes=outcomes,
        sibling_ids=tuple(s for s in (siblings or "").split(";") if s),
        # absent completion fields mean the source already filtered on them
        completed_phone=True if phone is None else parse_bool(phone),
        completed_mail=True if mail is None else parse_bool(mail),
        reported_drinkers=None if drinkers is None else int(float(drinkers)),
        reported_relation=relation,
    )


def write_csv(cohort: Cohort, path: str | os.PathLike, schema: Schema | None = None) -> Schema:
    """Write ``cohort`` so that :func:`ingest_csv` with the returned schema reads it back exactly."""
    schema = schema or Schema.for_cohort(cohort)
    label_to_code = dict(schema.subgroup_codes)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns())
        for s in cohort.subjects:
            row = []
            for fname in schema.fields:
                row.append(_field_cell(s, fname, label_to_code))
            for spec in schema.covariates:
                row.append(_num_cell(s.covariate(spec.name)))
            for o in schema.outcomes:
                row.append(_num_cell(s.outcomes.get(o.name)))
            w.writerow(row)
    return schema


def _num_cell(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _field_cell(s: Subject, name: str, label_to_code: Mapping[str, str]) -> str:
    v = getattr(s, name)
    if v is None:
        return ""
    if name == "subgroup":
        return label_to_code[v]
    if name == "sibling_ids":
        return ";".join(v)
    if isinstance(v, bool):
        return "1" if v else "0"
    return str(v)


# ---------------------------------------------------------------------------
# Eligibility and sibling imputation


def apply_eligibility(cohort: Cohort) -> Cohort:
    """Keep complete phone+mail respondents with a usable father-education and treatment report.

    Treatment is derived from the household report: exactly one problem drinker,
    who was the father. Subjects without a relation/drinker report keep an
    already-known treatment flag.
    """
    kept = []
    for s in cohort.subjects:
        if not (s.completed_phone and s.completed_mail) or s.subgroup is None:
            continue
        if s.reported_relation is None and s.reported_drinkers is None:
            if s.treated is None:
                continue
            kept.append(s)
            continue
        if s.reported_relation is None or s.reported_drinkers is None:
            continue
        if s.reported_relation == "other" or s.reported_drinkers > 1:
            continue
        treated = s.reported_relation == "father" and s.reported_drinkers == 1
        kept.append(replace(s, treated=treated) if s.treated is not treated else s)
    return cohort.with_subjects(kept)


def _id_key(sid: str):
    return (0, int(sid), sid) if sid.isdigit() else (1, 0, sid)


def impute_from_siblings(cohort: Cohort, fields: Sequence[str]) -> Cohort:
    """Fill missing values from siblings, scanning siblings in ascending id order.

    ``fields`` holds covariate names plus the special names ``"subgroup"``
    (father's education group) and ``"treatment"`` (relation, drinker count and
    treatment flag, copied together). Only values present in the input cohort are
    used as donors, so the result does not depend on subject order.
    """
    by_id = cohort.by_id
    cov_names = {c.name for c in cohort.covariate_specs}
    for f in fields:
        if f not in cov_names and f not in ("subgroup", "treatment"):
            raise CohortError(f"cannot impute unknown field {f!r}")
    out = []
    for s in cohort.subjects:
        sibs = []
        for sid in sorted(set(s.sibling_ids), key=_id_key):
            if sid == s.id:
                continue
            if sid not in by_id:
                log.warning("subject %s: sibling id %s not in cohort, skipped", s.id, sid)
                continue
            sibs.append(by_id[sid])
        if not sibs:
            out.append(s)
            continue
        new = s
        for f in fields:
            if f == "subgroup":
                if s.subgroup is None:
                    val = _first_donor(s, f, [(b.id, b.subgroup) for b in sibs])
                    if val is not None:
                        new = replace(new, subgroup=val)
            elif f == "treatment":
                if s.reported_relation is None and s.treated is None:
                    donors = [
                        (b.id, (b.reported_relation, b.reported_drinkers, b.treated))
                        for b in sibs
                        if b.reported_relation is not None or b.treated is not None
                    ]
                    val = _first_donor(s, f, donors)
                    if val is not None:
                        rel, drk, trt = val
                        new = replace(new, reported_relation=rel, reported_drinkers=drk, treated=trt)
            elif s.covariate(f) is None:
                val = _first_donor(s, f, [(b.id, b.covariate(f)) for b in sibs])
                if val is not None:
                    new = new.with_covariate(f, val)
        out.append(new)
    return cohort.with_subjects(out)


def _first_donor(s: Subject, fname: str, donors: list[tuple[str, object]]):
    present = [(sid, v) for sid, v in donors if v is not None]
    if not present:
        return None
    values = {v for _, v in present}
    if len(values) > 1:
        log.info(
            "subject %s: siblings disagree on %s (%s); using sibling %s",
            s.id,
            fname,
            ", ".join(f"{sid}={v}" for sid, v in present),
            present[0][0],
        )
    return present[0][1]


def count_missing(cohort: Cohort, fields: Sequence[str]) -> int:
    n = 0
    for s in cohort.subjects:
        for f in fields:
            if f == "subgroup":
                n += s.subgroup is None
            elif f == "treatment":
                n += s.reported_relation is None and s.treated is None
            else:
                n += s.covariate(f) is None
    return n


def is_missing(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))
