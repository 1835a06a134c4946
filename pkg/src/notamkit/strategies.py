"""Prompting strategies for foundational field extraction.

Covers zero-shot, k-shot in-context learning, chain-of-thought and
self-consistency prompting, tolerant parsing of model output, per-field
majority voting, and selective refinement of individual fields through a
second validation prompt (SRCV).
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from ._assets import asset_path, prompt
from .corpus import NotamRecord
from .errors import (
    EmptySamples,
    InsufficientExamples,
    InvalidJson,
    IoError,
    NoJsonFound,
    NotamkitError,
    ReplayMiss,
    SchemaMismatch,
    describe,
)
from .gateway import DEFAULT_MODEL, Backend, PromptRequest
from .schema import (
    ExtractionResult,
    FieldSchema,
    _hashable,
    builtin_schemas,
    normalize_record,
    normalize_value,
    render_field_list,
    validate_result,
)

log = logging.getLogger(__name__)

KINDS = ("zero_shot", "icl", "cot", "self_consistency")
ABLATION_SHOTS = (1, 3, 5, 7)
SC_TEMPERATURE_PRESETS = {
    "default": (0.3, 0.7, 1.0),
    "with_zero": (0.0, 0.3, 0.7, 1.0),
}


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "zero_shot"
    shots: int = 5
    naming: str = "clear"
    sc_temperatures: tuple[float, ...] = SC_TEMPERATURE_PRESETS["default"]
    sc_samples_per_temperature: int = 1
    vote: str = "field"
    model_id: str = DEFAULT_MODEL
    max_tokens: int = 1024

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if self.shots < 0:
            raise ValueError("shots must be >= 0")
        if self.naming not in ("weak", "clear"):
            raise ValueError("naming must be 'weak' or 'clear'")
        if self.kind == "self_consistency" and not self.sc_temperatures:
            raise ValueError("self-consistency needs at least one temperature")
        if self.sc_samples_per_temperature < 1:
            raise ValueError("sc_samples_per_temperature must be >= 1")
        if self.vote not in ("field", "whole"):
            raise ValueError("vote must be 'field' or 'whole'")
        object.__setattr__(self, "sc_temperatures", tuple(float(t) for t in self.sc_temperatures))


# -- in-context examples -----------------------------------------------------

@dataclass(frozen=True)
class IclExample:
    notam_text: str
    gold_output: tuple  # records, each a dict keyed by clear names
    category: str = ""

    def records(self) -> list[dict]:
        return [dict(r) for r in self.gold_output]


def load_icl_bank(path, schema: Optional[FieldSchema] = None) -> list[IclExample]:
    """JSONL of ``{notam_text, gold_output, category}``; gold outputs must validate against ``schema``."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read example bank {path}: {exc}") from exc
    bank = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        gold = obj["gold_output"]
        if isinstance(gold, str):
            gold = json.loads(gold)
        records = [gold] if isinstance(gold, dict) else list(gold)
        if schema is not None:
            records = [normalize_record(schema, r) for r in records]
            problems = validate_result(ExtractionResult("", schema.schema_id, records), schema)
            if problems:
                raise ValueError(f"{path}:{no}: gold output violates {schema.schema_id}: {problems[0]}")
        bank.append(IclExample(obj["notam_text"], tuple(records), obj.get("category", "")))
    return bank


def builtin_bank(schema: FieldSchema) -> list[IclExample]:
    path = asset_path(f"icl_{schema.schema_id}.jsonl")
    if not path.is_file():
        return []
    return load_icl_bank(path, schema)


def stratified_order(bank: Sequence[IclExample]) -> list[IclExample]:
    """Round-robin over categories (sorted by name), keeping file order inside each category."""
    groups: dict[str, list[IclExample]] = {}
    for ex in bank:
        groups.setdefault(ex.category, []).append(ex)
    ordered = []
    queues = [groups[c] for c in sorted(groups)]
    depth = max((len(q) for q in queues), default=0)
    for i in range(depth):
        ordered.extend(q[i] for q in queues if i < len(q))
    return ordered


def select_examples(bank: Sequence[IclExample], shots: int) -> list[IclExample]:
    if len(bank) < shots:
        raise InsufficientExamples(f"{shots}-shot prompt needs {shots} examples, bank has {len(bank)}")
    return stratified_order(bank)[:shots]


# -- prompt construction -----------------------------------------------------

def _rename(records: Iterable[dict], schema: FieldSchema, naming: str) -> list[dict]:
    out = []
    for rec in records:
        out.append({schema.field(k).name(naming) if k in schema.field_names else k: v for k, v in rec.items()})
    return out


def system_prompt(schema: FieldSchema, naming: str = "clear") -> str:
    field_list = render_field_list(schema, naming)
    template = schema.schema_id if asset_path(f"prompts/{schema.schema_id}.txt").is_file() else "extraction"
    return prompt(template, field_list=field_list, domain=schema.domain)


def render_example(i: int, ex: IclExample, schema: FieldSchema, naming: str) -> str:
    gold = _rename(ex.records(), schema, naming)
    payload = json.dumps(gold if len(gold) != 1 else gold[0], ensure_ascii=False)
    return f"### Example {i}\nNOTAM:\n{ex.notam_text}\nOutput:\n```json\n{payload}\n```"


def build_prompt(
    schema: FieldSchema,
    notam: NotamRecord,
    cfg: StrategyConfig,
    bank: Sequence[IclExample] = (),
) -> PromptRequest:
    """Deterministic prompt for one notice. Always temperature 0.0; see :func:`sample_requests`."""
    system = system_prompt(schema, cfg.naming)
    if cfg.kind == "cot":
        system += "\n\n" + prompt("cot_preamble")
    parts = []
    if cfg.kind == "icl" and cfg.shots:
        examples = select_examples(bank, cfg.shots)
        parts.extend(render_example(i, ex, schema, cfg.naming) for i, ex in enumerate(examples, start=1))
    parts.append(f"NOTAM:\n{notam.raw_text}")
    return PromptRequest(
        system_text=system,
        user_text="\n\n".join(parts),
        temperature=0.0,
        max_tokens=cfg.max_tokens,
        model_id=cfg.model_id,
    )


def sample_requests(base: PromptRequest, cfg: StrategyConfig) -> list[PromptRequest]:
    return [
        replace(base, temperature=t, sample_index=j)
        for t in cfg.sc_temperatures
        for j in range(cfg.sc_samples_per_temperature)
    ]


# -- output parsing ----------------------------------------------------------

_FENCE_RE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)


def extract_json(text: str):
    """First JSON object or array in ``text``; fenced blocks are tried before bare JSON."""
    for m in _FENCE_RE.finditer(text):
        try:
            obj = json.loads(m.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(obj, (dict, list)):
            return obj
    starts = [i for i, ch in enumerate(text) if ch in "[{"]
    if not starts:
        raise NoJsonFound("model output contains no JSON")
    decoder = json.JSONDecoder()
    for i in starts:
        try:
            obj, _ = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, (dict, list)):
            return obj
    raise InvalidJson("model output contains brackets but no parsable JSON")


def parse_output(text: str, schema: FieldSchema, notam_id: str = "") -> ExtractionResult:
    obj = extract_json(text)
    if isinstance(obj, dict) and isinstance(obj.get("records"), list):
        obj = obj["records"]
    items = [obj] if isinstance(obj, dict) else obj
    records, notes = [], []
    for item in items:
        if isinstance(item, dict):
            records.append(normalize_record(schema, item))
        else:
            notes.append(f"ignored non-object element {item!r}")
    if items and not records:
        raise InvalidJson("JSON array holds no objects")
    result = ExtractionResult(notam_id, schema.schema_id, records, raw_model_output=text, notes=notes)
    result.violations = validate_result(result, schema)
    return result


# -- voting ------------------------------------------------------------------

def _temp_rank(t: Optional[float]) -> float:
    return math.inf if t is None else t


def _key_fields(schema_id: str) -> Optional[tuple[str, ...]]:
    schema = builtin_schemas().get(schema_id)
    return schema.key_fields if schema else None


def _aligned(records: list[dict], key_fields: Optional[tuple[str, ...]]) -> dict[tuple, dict]:
    out: dict[tuple, dict] = {}
    seen: Counter = Counter()
    for pos, rec in enumerate(records):
        base = tuple(_hashable(rec.get(k)) for k in key_fields) if key_fields else (pos,)
        out[(base, seen[base])] = rec
        seen[base] += 1
    return out


def self_consistency_vote(
    samples: Sequence[ExtractionResult],
    key_fields: Optional[Sequence[str]] = None,
    mode: str = "field",
) -> ExtractionResult:
    """Majority vote over sampled extractions.

    Records are aligned by the schema's key fields (by position when the
    schema has none). Per field the plurality value wins; a missing field and
    an explicit null are the same vote. Ties go to the sample drawn at the
    lowest temperature, then to the earliest sample.
    """
    if not samples:
        raise EmptySamples("self-consistency needs at least one sample")
    ids = {(s.notam_id, s.schema_id) for s in samples}
    if len(ids) > 1:
        raise SchemaMismatch(f"samples disagree on notam/schema: {sorted(ids)}")
    ranked = [samples[i] for i in sorted(range(len(samples)), key=lambda i: (_temp_rank(samples[i].temperature), i))]
    head = ranked[0]

    def pick(values: list) -> object:
        counts = Counter(_hashable(v) for v in values)
        best = max(counts.values())
        tied = {k for k, c in counts.items() if c == best}
        for v in values:  # values follow ranked order
            if _hashable(v) in tied:
                return v
        raise AssertionError("unreachable")

    if mode == "whole":
        canon = [json.dumps(s.records, sort_keys=True, ensure_ascii=False) for s in ranked]
        winner = ranked[canon.index(pick(canon))]
        return ExtractionResult(head.notam_id, head.schema_id, [dict(r) for r in winner.records], winner.raw_model_output)
    if mode != "field":
        raise ValueError(f"unknown vote mode {mode!r}")

    keys = tuple(key_fields) if key_fields is not None else _key_fields(head.schema_id)
    aligned = [_aligned(s.records, keys) for s in ranked]
    order: list[tuple] = []
    for table in aligned:
        order.extend(k for k in table if k not in order)

    records = []
    for k in order:
        present = [k in table for table in aligned]
        if not pick(present):
            continue
        holders = [table[k] for table in aligned if k in table]
        fields: list[str] = []
        for rec in holders:
            fields.extend(f for f in rec if f not in fields)
        merged = {}
        for f in fields:
            value = pick([rec.get(f) for rec in holders])
            if value is not None or any(f in rec for rec in holders):
                merged[f] = value
        records.append(merged)
    return ExtractionResult(head.notam_id, head.schema_id, records, head.raw_model_output)


# -- pipeline ----------------------------------------------------------------

def _parse_completion(comp, schema: FieldSchema, notam_id: str, temperature: Optional[float]) -> ExtractionResult:
    if not comp.ok:
        if isinstance(comp.exception, ReplayMiss):
            raise comp.exception
        return ExtractionResult(notam_id, schema.schema_id, error=comp.error, temperature=temperature)
    try:
        result = parse_output(comp.text, schema, notam_id)
    except (NoJsonFound, InvalidJson) as exc:
        return ExtractionResult(
            notam_id, schema.schema_id, raw_model_output=comp.text, error=describe(exc), temperature=temperature
        )
    result.temperature = temperature
    return result


def run_extraction(
    records: Sequence[NotamRecord],
    schema: FieldSchema,
    cfg: StrategyConfig,
    backend: Backend,
    bank: Sequence[IclExample] = (),
    max_in_flight: int = 1,
) -> list[ExtractionResult]:
    """One result per notice, in order. Failed notices get an empty result carrying ``error``.

    A cassette miss is a configuration problem rather than a per-notice
    failure, so :class:`ReplayMiss` propagates.
    """
    if not records:
        return []
    bases = [build_prompt(schema, rec, cfg, bank) for rec in records]
    if cfg.kind != "self_consistency":
        completions = backend.complete_batch(bases, max_in_flight)
        return [_parse_completion(c, schema, rec.id, 0.0) for c, rec in zip(completions, records)]

    per_record = [sample_requests(b, cfg) for b in bases]
    flat = [r for reqs in per_record for r in reqs]
    completions = iter(backend.complete_batch(flat, max_in_flight))
    results = []
    for rec, reqs in zip(records, per_record):
        samples = [_parse_completion(next(completions), schema, rec.id, r.temperature) for r in reqs]
        good = [s for s in samples if s.ok]
        if not good:
            results.append(ExtractionResult(rec.id, schema.schema_id, error=samples[0].error))
            continue
        voted = self_consistency_vote(good, schema.key_fields or None, cfg.vote)
        voted.violations = validate_result(voted, schema)
        dropped = len(samples) - len(good)
        voted.notes = [f"vote over {len(good)} samples"] + ([f"{dropped} samples failed"] if dropped else [])
        results.append(voted)
    return results


# -- selective refinement (SRCV) ---------------------------------------------

TRIGGER_KINDS = ("text_contains", "text_regex", "value_regex", "value_not_null", "value_is_null")


@dataclass(frozen=True)
class Trigger:
    kind: str
    pattern: Optional[str] = None

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind in ("text_contains", "text_regex", "value_regex") and not self.pattern:
            raise ValueError(f"trigger {self.kind} needs a pattern")

    def fires(self, text: str, value) -> bool:
        if self.kind == "text_contains":
            return self.pattern.upper() in text.upper()
        if self.kind == "text_regex":
            return re.search(self.pattern, text) is not None
        if self.kind == "value_regex":
            return value is not None and re.search(self.pattern, str(value)) is not None
        if self.kind == "value_not_null":
            return value is not None
        return value is None


@dataclass(frozen=True)
class SrcvRule:
    rule_id: str
    target_field: str
    triggers: tuple[Trigger, ...]
    instruction: str
    schema_id: Optional[str] = None

    def fires(self, text: str, value) -> bool:
        return all(t.fires(text, value) for t in self.triggers)

    @classmethod
    def from_json(cls, obj: dict) -> "SrcvRule":
        trig = obj["trigger"]
        trig = [trig] if isinstance(trig, dict) else trig
        return cls(
            rule_id=obj["rule_id"],
            target_field=obj["target_field"],
            triggers=tuple(Trigger(t["kind"], t.get("pattern")) for t in trig),
            instruction=obj["instruction"],
            schema_id=obj.get("schema_id"),
        )


def load_srcv_rules(path, schema: Optional[FieldSchema] = None) -> list[SrcvRule]:
    """Rules file: JSON list of ``{rule_id, target_field, trigger, instruction[, schema_id]}``.

    With ``schema`` given, rules bound to other schemas are skipped and every
    remaining rule must target a field of ``schema``.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read SRCV rules {path}: {exc}") from exc
    rules = [SrcvRule.from_json(r) for r in raw]
    if schema is None:
        return rules
    kept = []
    for rule in rules:
        if rule.schema_id not in (None, schema.schema_id):
            continue
        if rule.target_field not in schema.field_names:
            if rule.schema_id is None:
                continue
            raise ValueError(f"rule {rule.rule_id}: {rule.target_field!r} is not a field of {schema.schema_id}")
        kept.append(rule)
    return kept


def builtin_srcv_rules(schema: Optional[FieldSchema] = None) -> list[SrcvRule]:
    return load_srcv_rules(asset_path("srcv_rules.json"), schema)


def srcv_request(rule: SrcvRule, notam: NotamRecord, value, model_id: str = DEFAULT_MODEL) -> PromptRequest:
    system = prompt("srcv") + f"\n\nRule: {rule.instruction}"
    user = (
        f"NOTAM:\n{notam.raw_text}\n\n"
        f"Rule ID: {rule.rule_id}\n"
        f"Field: {rule.target_field}\n"
        f"Extracted value: {json.dumps(value, ensure_ascii=False)}"
    )
    return PromptRequest(system, user, temperature=0.0, model_id=model_id)


def _parse_verdict(text: str):
    obj = extract_json(text)
    if not isinstance(obj, dict) or obj.get("verdict") not in ("confirm", "correct") or "value" not in obj:
        raise InvalidJson(f"unusable verdict: {text[:80]!r}")
    return obj["verdict"], obj["value"]


def apply_srcv(
    result: ExtractionResult,
    notam: NotamRecord,
    rules: Sequence[SrcvRule],
    backend: Backend,
    schema: Optional[FieldSchema] = None,
    model_id: str = DEFAULT_MODEL,
) -> ExtractionResult:
    """Re-check the fields whose rule trigger fires; every other field is left untouched.

    Validations run one at a time in record/rule order. A failed validation
    keeps the original value and adds a note.
    """
    if schema is not None and schema.schema_id != result.schema_id:
        raise SchemaMismatch(f"result is {result.schema_id!r}, schema is {schema.schema_id!r}")
    schema = schema or builtin_schemas().get(result.schema_id)
    for rule in rules:
        if rule.schema_id not in (None, result.schema_id):
            raise SchemaMismatch(f"rule {rule.rule_id} is registered for {rule.schema_id}")
    if not result.ok:
        return result

    records = list(result.records)
    notes = list(result.notes)
    changed = False
    for i, rec in enumerate(result.records):
        for rule in rules:
            value = records[i].get(rule.target_field)
            if not rule.fires(notam.raw_text, value):
                continue
            req = srcv_request(rule, notam, value, model_id)
            try:
                text = backend.complete(req).text
                verdict, new = _parse_verdict(text)
            except NotamkitError as exc:
                notes.append(f"error: srcv {rule.rule_id} record {i}: {describe(exc)}")
                continue
            if verdict == "confirm":
                notes.append(f"srcv {rule.rule_id} record {i}: confirmed")
                continue
            if schema is not None and rule.target_field in schema.field_names:
                new = normalize_value(schema.field(rule.target_field), new)
            if new == value and (rule.target_field in records[i]):
                notes.append(f"srcv {rule.rule_id} record {i}: confirmed")
                continue
            updated = dict(records[i])
            updated[rule.target_field] = new
            records[i] = updated
            changed = True
            notes.append(f"srcv {rule.rule_id} record {i}: {value!r} -> {new!r}")

    out = replace(result, records=records if changed else result.records, notes=notes)
    if changed and schema is not None:
        out.violations = validate_result(out, schema)
    return out
