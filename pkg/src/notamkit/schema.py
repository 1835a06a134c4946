"""Foundational field schemas, value normalization, and the runway-lighting rules."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .corpus import format_timestamp, parse_timestamp
from .errors import IoError, MissingEvidence, SchemaMismatch

DOMAINS = ("AirspaceManagement", "GroundFacility", "LandingAid", "RunwayTaxiway", "FlightHazard")
KINDS = ("text", "enum", "number", "timestamp")

FT_TO_M = 0.3048

# Token lists per runway lighting system.
LIGHTING_KEYWORDS = {
    "REDL": ["EDGE", "REDL", "EDGE LGT"],
    "ALS": ["APCH", "APPROACH", "ALS", "PALS"],
    "RCL": ["CENTERLINE", "RCL", "CL"],
    "RTZL": ["TOUCHDOWN", "TDZ", "RTZL"],
}
_KEYWORD_INDEX = {tok: cat for cat, toks in LIGHTING_KEYWORDS.items() for tok in toks}

ALS_TIERS = ("NALS", "BALS", "IALS", "FALS")  # ascending
ALS_BREAKPOINTS = ((720, "FALS"), (420, "IALS"), (210, "BALS"))


def grade_als(distance_m: Optional[float], percentage: Optional[float] = None, *, vague: bool = False) -> str:
    """Grade the remaining approach lighting.

    An explicit distance wins over a percentage; a percentage alone, or (with
    ``vague=True``) unquantified degradation, is graded conservatively as BALS.
    """
    if distance_m is not None:
        for lower, tier in ALS_BREAKPOINTS:
            if distance_m >= lower:
                return tier
        return "NALS"
    if percentage is not None or vague:
        return "BALS"
    raise MissingEvidence("ALS grading needs a distance or a percentage")


def map_lighting_keyword(token: str) -> Optional[str]:
    if not isinstance(token, str):
        return None
    return _KEYWORD_INDEX.get(" ".join(token.upper().split()))


@dataclass(frozen=True)
class FieldDef:
    clear_name: str
    weak_name: str
    kind: str
    description: str = ""
    enum_values: tuple[str, ...] = ()
    unit: Optional[str] = None
    nullable: bool = True
    multiple: bool = False
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.clear_name}: unknown kind {self.kind!r}")
        if self.kind == "enum" and not self.enum_values:
            raise ValueError(f"{self.clear_name}: enum field without values")

    def name(self, naming: str = "clear") -> str:
        if naming not in ("weak", "clear"):
            raise ValueError(f"naming must be 'weak' or 'clear', got {naming!r}")
        return self.clear_name if naming == "clear" else self.weak_name

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "clear_name": self.clear_name,
            "weak_name": self.weak_name,
            "kind": self.kind,
            "description": self.description,
            "nullable": self.nullable,
        }
        if self.enum_values:
            out["enum_values"] = list(self.enum_values)
        if self.unit:
            out["unit"] = self.unit
        if self.multiple:
            out["multiple"] = True
        if self.aliases:
            out["aliases"] = list(self.aliases)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FieldDef":
        return cls(
            clear_name=obj["clear_name"],
            weak_name=obj["weak_name"],
            kind=obj["kind"],
            description=obj.get("description", ""),
            enum_values=tuple(obj.get("enum_values") or ()),
            unit=obj.get("unit"),
            nullable=bool(obj.get("nullable", True)),
            multiple=bool(obj.get("multiple", False)),
            aliases=tuple(obj.get("aliases") or ()),
        )


@dataclass(frozen=True)
class FieldSchema:
    schema_id: str
    domain: str
    fields: tuple[FieldDef, ...]
    key_fields: tuple[str, ...] = ()

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        clear = [f.clear_name for f in self.fields]
        weak = [f.weak_name for f in self.fields]
        if len(set(clear)) != len(clear) or len(set(weak)) != len(weak):
            raise ValueError(f"{self.schema_id}: duplicate field names")
        missing = set(self.key_fields) - set(clear)
        if missing:
            raise ValueError(f"{self.schema_id}: key fields not in schema: {sorted(missing)}")

    @property
    def field_names(self) -> list[str]:
        return [f.clear_name for f in self.fields]

    def field(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.clear_name == name:
                return f
        raise KeyError(name)

    def resolve_name(self, name: str) -> Optional[str]:
        """Canonical (clear) name for a clear, weak or alias spelling."""
        return self._name_index().get(name.strip().lower())

    @lru_cache(maxsize=None)
    def _name_index(self) -> dict[str, str]:
        index = {}
        for f in self.fields:
            for spelling in (f.clear_name, f.weak_name, *f.aliases):
                index.setdefault(spelling.lower(), f.clear_name)
        return index

    def record_key(self, record: dict) -> tuple:
        return tuple(_hashable(record.get(k)) for k in self.key_fields)

    @property
    def has_lighting_rules(self) -> bool:
        names = set(self.field_names)
        return {"lightcategory", "status", "als", "distance", "percentage"} <= names

    def to_json(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "domain": self.domain,
            "key_fields": list(self.key_fields),
            "fields": [f.to_json() for f in self.fields],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FieldSchema":
        try:
            return cls(
                schema_id=obj["schema_id"],
                domain=obj["domain"],
                fields=tuple(FieldDef.from_json(f) for f in obj["fields"]),
                key_fields=tuple(obj.get("key_fields") or ()),
            )
        except KeyError as exc:
            raise ValueError(f"schema definition missing key {exc}") from None


def _hashable(value):
    if isinstance(value, list):
        return tuple(_hashable(v) for v in value)
    if isinstance(value, dict):
        return tuple(sorted((k, _hashable(v)) for k, v in value.items()))
    return value


def load_schema(path) -> FieldSchema:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read schema {path}: {exc}") from exc
    return FieldSchema.from_json(obj)


@lru_cache(maxsize=None)
def builtin_schemas() -> dict[str, FieldSchema]:
    out = {}
    folder = resources.files("notamkit") / "assets" / "schemas"
    for entry in sorted(folder.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            schema = FieldSchema.from_json(json.loads(entry.read_text(encoding="utf-8")))
            out[schema.schema_id] = schema
    return out


def get_schema(ref: str) -> FieldSchema:
    """Built-in schema by id, or a schema definition file by path."""
    schemas = builtin_schemas()
    if ref in schemas:
        return schemas[ref]
    if Path(ref).is_file():
        return load_schema(ref)
    raise KeyError(f"unknown schema {ref!r}; built-ins: {', '.join(schemas)}")


# -- normalization -----------------------------------------------------------

_NULL_STRINGS = {"", "null", "none"}
_NUMBER_RE = re.compile(
    r"^(?P<fl>FL\s*)?(?P<num>[-+]?\d+(?:[.,]\d+)?)\s*(?P<unit>M|METERS?|METRES?|FT|FEET|%|PCT|PERCENT)?$"
)


def _canon_enum_key(value: str) -> str:
    return re.sub(r"[\s_\-]", "", value).upper()


def _normalize_number(value, unit: Optional[str]):
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        number, source_unit = float(value), None
    else:
        text = " ".join(str(value).upper().split())
        if text in ("SFC", "GND"):
            return 0
        m = _NUMBER_RE.match(text)
        if not m:
            return text
        number = float(m.group("num").replace(",", "."))
        source_unit = m.group("unit")
        if m.group("fl"):
            number, source_unit = number * 100, "FT"
    if not math.isfinite(number):
        return value
    if source_unit in ("FT", "FEET"):
        number *= FT_TO_M
    if unit == "m" or source_unit in ("FT", "FEET", "M", "METER", "METERS", "METRE", "METRES"):
        return int(round(number))
    return int(number) if number.is_integer() else number


def normalize_value(fdef: FieldDef, value):
    """Canonical form used for comparison, voting and scoring."""
    if value is None:
        return None
    if isinstance(value, str) and value.strip().lower() in _NULL_STRINGS:
        return None
    if fdef.multiple:
        items = value if isinstance(value, list) else re.split(r"[,|]", str(value))
        single = FieldDef(fdef.clear_name, fdef.weak_name, fdef.kind, enum_values=fdef.enum_values, unit=fdef.unit)
        normed = {normalize_value(single, v) for v in items}
        normed.discard(None)
        return sorted(normed, key=str) or None
    if isinstance(value, (list, dict)):
        return value
    if fdef.kind == "number":
        return _normalize_number(value, fdef.unit)
    text = " ".join(str(value).split())
    if fdef.kind == "enum":
        key = _canon_enum_key(text)
        for canonical in fdef.enum_values:
            if _canon_enum_key(canonical) == key:
                return canonical
        mapped = map_lighting_keyword(text)
        if mapped in fdef.enum_values:
            return mapped
        return text.upper()
    if fdef.kind == "timestamp":
        if text.upper().startswith("PERM"):
            return "PERM"
        ts = parse_timestamp(text)
        return format_timestamp(ts) if ts else text.upper()
    return text.upper()


def normalize_record(schema: FieldSchema, record: dict) -> dict:
    """Rename keys to clear names and normalize values; unknown keys are kept verbatim."""
    out: dict[str, Any] = {}
    for key, value in record.items():
        name = schema.resolve_name(str(key))
        if name is None:
            out.setdefault(str(key), value)
        else:
            out[name] = normalize_value(schema.field(name), value)
    return out


# -- extraction results ------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    record: int
    field: str
    rule: str
    value: Any

    def to_json(self) -> dict:
        return {"record": self.record, "field": self.field, "rule": self.rule, "value": self.value}


@dataclass
class ExtractionResult:
    notam_id: str
    schema_id: str
    records: list[dict] = field(default_factory=list)
    raw_model_output: str = ""
    violations: list[Violation] = field(default_factory=list)
    error: Optional[str] = None
    notes: list[str] = field(default_factory=list)
    temperature: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "notam_id": self.notam_id,
            "schema_id": self.schema_id,
            "records": self.records,
            "raw_model_output": self.raw_model_output,
            "violations": [v.to_json() for v in self.violations],
            "error": self.error,
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExtractionResult":
        records = obj.get("records") or []
        if isinstance(records, dict):
            records = [records]
        return cls(
            notam_id=str(obj["notam_id"]),
            schema_id=str(obj["schema_id"]),
            records=[dict(r) for r in records],
            raw_model_output=obj.get("raw_model_output", ""),
            violations=[Violation(**v) for v in obj.get("violations") or ()],
            error=obj.get("error"),
            notes=list(obj.get("notes") or ()),
        )


_UNAVAILABLE_ONLY = {"RCL", "REDL", "RTZL"}
_ISO_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")


def _check_value(fdef: FieldDef, value) -> Optional[str]:
    if value is None:
        return None if fdef.nullable else "not_nullable"
    values = value if (fdef.multiple and isinstance(value, list)) else [value]
    for v in values:
        if fdef.kind == "enum" and v not in fdef.enum_values:
            return "enum_member"
        if fdef.kind == "number" and (isinstance(v, bool) or not isinstance(v, (int, float))):
            return "not_numeric"
        if fdef.kind == "timestamp" and not (isinstance(v, str) and _ISO_RE.match(v)):
            return "not_timestamp"
        if fdef.kind == "text" and not isinstance(v, str):
            return "not_text"
    return None


def _lighting_violations(i: int, rec: dict) -> list[Violation]:
    out = []
    cat, status, als = rec.get("lightcategory"), rec.get("status"), rec.get("als")
    if cat in _UNAVAILABLE_ONLY:
        if status != "unavailable":
            out.append(Violation(i, "status", "partial_means_unavailable", status))
        if als is not None:
            out.append(Violation(i, "als", "als_only_for_als_category", als))
    if status == "downgrade":
        if cat != "ALS":
            out.append(Violation(i, "lightcategory", "downgrade_requires_als", cat))
        if als is None:
            out.append(Violation(i, "als", "downgrade_requires_grade", als))
    distance, pct = rec.get("distance"), rec.get("percentage")
    numeric = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)  # noqa: E731
    if als is not None and (numeric(distance) or numeric(pct)):
        expected = grade_als(distance if numeric(distance) else None, pct if numeric(pct) else None)
        if als != expected:
            out.append(Violation(i, "als", "als_grade", als))
    return out


def validate_result(result: ExtractionResult, schema: FieldSchema) -> list[Violation]:
    if result.schema_id != schema.schema_id:
        raise SchemaMismatch(f"result is {result.schema_id!r}, schema is {schema.schema_id!r}")
    names = set(schema.field_names)
    violations: list[Violation] = []
    for i, rec in enumerate(result.records):
        for key, value in rec.items():
            if key not in names:
                violations.append(Violation(i, key, "unknown_field", value))
                continue
            rule = _check_value(schema.field(key), value)
            if rule:
                violations.append(Violation(i, key, rule, value))
        if schema.has_lighting_rules:
            violations.extend(_lighting_violations(i, rec))
    return violations


def _kind_text(f: FieldDef) -> str:
    if f.kind == "enum":
        text = "one or more of " if f.multiple else "one of "
        text += ", ".join(f.enum_values)
    elif f.kind == "number":
        text = f"number ({f.unit})" if f.unit else "number"
    elif f.kind == "timestamp":
        text = "ISO-8601 UTC timestamp"
    else:
        text = "text"
    return text + (", or null" if f.nullable else "")


def render_field_list(schema: FieldSchema, naming: str = "clear") -> str:
    return "\n".join(f"- {f.name(naming)} [{_kind_text(f)}]: {f.description}" for f in schema.fields)
