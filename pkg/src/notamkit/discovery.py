"""Multi-agent field discovery: three sequential agents, then Jaccard consensus merging."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

from ._assets import prompt, read_asset
from .corpus import NotamRecord
from .errors import GatewayError, InvalidJson, MalformedAgentOutput, NoJsonFound, StageError
from .gateway import DEFAULT_MODEL, Backend, PromptRequest
from .strategies import extract_json

log = logging.getLogger(__name__)

ORIGINS = ("discovery", "analysis", "validation", "merged")
STAGES = ("Z1", "Z2", "Z3", "Z_MDA")
STOPWORDS = frozenset({"the", "a", "of", "to", "for", "and"})
RETRY_SUFFIX = "\n\nReturn valid JSON only: a JSON array and nothing else."


@dataclass(frozen=True)
class EmergentField:
    name: str
    description: str
    value: str
    sources: tuple[str, ...]
    origin_agent: str = "discovery"

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise ValueError(f"field {self.name!r} has no source excerpts")
        if not name_tokens(self.name):
            raise ValueError(f"field name {self.name!r} has no tokens")
        if self.origin_agent not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin_agent!r}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "value": self.value,
            "sources": list(self.sources),
            "origin_agent": self.origin_agent,
        }

    @classmethod
    def from_json(cls, obj: dict, origin: Optional[str] = None) -> "EmergentField":
        sources = obj.get("sources")
        if isinstance(sources, str):
            sources = [sources]
        value = obj.get("value", "")
        return cls(
            name=str(obj["name"]),
            description=str(obj.get("description") or ""),
            value="" if value is None else (value if isinstance(value, str) else json.dumps(value)),
            sources=tuple(str(s) for s in sources or ()),
            origin_agent=origin or obj.get("origin_agent", "discovery"),
        )


@dataclass(frozen=True)
class CandidateSet:
    notam_id: str
    stage: str
    fields: tuple[EmergentField, ...]
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "notes", tuple(self.notes))

    def to_json(self) -> dict:
        return {
            "notam_id": self.notam_id,
            "stage": self.stage,
            "fields": [f.to_json() for f in self.fields],
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateSet":
        return cls(
            obj["notam_id"],
            obj.get("stage", "Z_MDA"),
            tuple(EmergentField.from_json(f) for f in obj.get("fields", ())),
            tuple(obj.get("notes", ())),
        )


@dataclass(frozen=True)
class AggregatorConfig:
    tau: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")


# -- tokens and similarity ---------------------------------------------------

def canonical_token(tok: str) -> str:
    """Strip one of -ing / -ed / plural -s when at least four characters remain."""
    for suffix in ("ing", "ed"):
        if tok.endswith(suffix) and len(tok) - len(suffix) >= 4:
            return tok[: -len(suffix)]
    if tok.endswith("s") and not tok.endswith("ss") and len(tok) - 1 >= 4:
        return tok[:-1]
    return tok


def _tokens(text: str) -> set[str]:
    words = re.split(r"[^a-z0-9]+", text.lower())
    return {canonical_token(w) for w in words if w and w not in STOPWORDS}


def name_tokens(name: str) -> frozenset[str]:
    return frozenset(_tokens(name))


def field_tokens(f: EmergentField) -> frozenset[str]:
    return frozenset(_tokens(f.name) | _tokens(f.description))


def jaccard_sets(a: Iterable[str], b: Iterable[str]) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def jaccard(f1: EmergentField, f2: EmergentField) -> float:
    return jaccard_sets(field_tokens(f1), field_tokens(f2))


# -- aggregation -------------------------------------------------------------

class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def similarity_components(fields: Sequence[EmergentField], tau: float) -> list[list[int]]:
    """Connected components of the graph linking pairs with Jaccard above ``tau``, ordered by first member."""
    toks = [field_tokens(f) for f in fields]
    ds = _DisjointSet(len(fields))
    for i in range(len(fields)):
        for j in range(i + 1, len(fields)):
            if jaccard_sets(toks[i], toks[j]) > tau:
                ds.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(len(fields)):
        groups.setdefault(ds.find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def representative(fields: Sequence[EmergentField]) -> EmergentField:
    """Most sources wins; then the longer description; then the lexicographically first name."""
    return min(fields, key=lambda f: (-len(f.sources), -len(f.description), f.name))


def union_sources(fields: Iterable[EmergentField]) -> tuple[str, ...]:
    out: list[str] = []
    for f in fields:
        out.extend(s for s in f.sources if s not in out)
    return tuple(out)


def merge_fields(fields: Sequence[EmergentField], name: Optional[str] = None) -> EmergentField:
    if len(fields) == 1 and name is None:
        return fields[0]
    rep = representative(fields)
    return EmergentField(
        name=name or rep.name,
        description=rep.description,
        value=rep.value,
        sources=union_sources(fields),
        origin_agent="merged",
    )


def consensus_aggregate(fields: Sequence[EmergentField], cfg: AggregatorConfig = AggregatorConfig()) -> list[EmergentField]:
    return [merge_fields([fields[i] for i in comp]) for comp in similarity_components(fields, cfg.tau)]


# -- relevance score (logged only) --------------------------------------------

@lru_cache(maxsize=None)
def aviation_lexicon() -> frozenset[str]:
    words = (ln.strip().lower() for ln in read_asset("aviation_lexicon.txt").splitlines())
    return frozenset(canonical_token(w) for w in words if w and not w.startswith("#"))


def domain_relevance(f: EmergentField) -> float:
    """Share of a field's tokens (name, description, sources) found in the aviation lexicon."""
    toks = _tokens(f.name) | _tokens(f.description)
    for s in f.sources:
        toks |= _tokens(s)
    if not toks:
        return 0.0
    lex = aviation_lexicon()
    return sum(t in lex for t in toks) / len(toks)


# -- agents ------------------------------------------------------------------

def sources_grounded(f: EmergentField, text: str) -> bool:
    haystack = text.lower()
    return all(s.strip() and s.lower() in haystack for s in f.sources)


def _fields_json(fields: Sequence[EmergentField]) -> str:
    return json.dumps(
        [{"name": f.name, "description": f.description, "value": f.value, "sources": list(f.sources)} for f in fields],
        ensure_ascii=False,
        indent=1,
    )


def agent_request(
    stage: str, notam: NotamRecord, prior: Sequence[Sequence[EmergentField]], model_id: str = DEFAULT_MODEL
) -> PromptRequest:
    template = {"Z1": "discovery_agent", "Z2": "analysis_agent", "Z3": "validation_agent"}[stage]
    parts = [f"NOTAM:\n{notam.raw_text}"]
    for label, fields in zip(("Z1", "Z2"), prior):
        parts.append(f"Candidate fields {label}:\n{_fields_json(fields)}")
    return PromptRequest(prompt(template), "\n\n".join(parts), temperature=0.0, model_id=model_id)


def parse_agent_fields(text: str, origin: str) -> tuple[list[EmergentField], list[str]]:
    """Agent output contract: JSON array of ``{name, description, value, sources}``."""
    obj = extract_json(text)
    if isinstance(obj, dict):
        obj = obj.get("fields", [obj])
    if not isinstance(obj, list):
        raise InvalidJson("agent output is not a JSON array")
    fields, notes = [], []
    for item in obj:
        try:
            fields.append(EmergentField.from_json(item, origin))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            notes.append(f"{origin}: skipped candidate {str(item)[:60]!r} ({exc})")
    return fields, notes


def call_agent(backend: Backend, req: PromptRequest, parse, stage: str):
    """Complete ``req`` and parse it, re-prompting once on malformed JSON."""
    for attempt in range(2):
        try:
            text = backend.complete(req).text
        except GatewayError as exc:
            raise StageError(stage, exc) from exc
        try:
            return parse(text)
        except (NoJsonFound, InvalidJson) as exc:
            log.warning("%s returned malformed output (attempt %d): %s", stage, attempt + 1, exc)
            req = replace(req, user_text=req.user_text + RETRY_SUFFIX)
    raise MalformedAgentOutput(f"{stage}: no usable JSON after one retry")


def run_mda(
    notam: NotamRecord,
    backend: Backend,
    cfg: AggregatorConfig = AggregatorConfig(),
    model_id: str = DEFAULT_MODEL,
    stages: Optional[dict] = None,
) -> CandidateSet:
    """Discovery -> Analysis -> Validation agents, then consensus aggregation of Z3.

    Candidates citing text absent from the notice are dropped and noted.
    Pass a dict as ``stages`` to receive Z1..Z3.
    """
    notes: list[str] = []
    produced: list[list[EmergentField]] = []
    for stage, origin in (("Z1", "discovery"), ("Z2", "analysis"), ("Z3", "validation")):
        req = agent_request(stage, notam, produced, model_id)
        fields, parse_notes = call_agent(backend, req, lambda t, o=origin: parse_agent_fields(t, o), stage)
        notes.extend(parse_notes)
        kept = []
        for f in fields:
            if sources_grounded(f, notam.raw_text):
                kept.append(f)
            else:
                notes.append(f"{stage}: dropped {f.name!r}, source not found in notice")
                log.info("%s %s: dropped %r (ungrounded source)", notam.id, stage, f.name)
        produced.append(kept)
        if stages is not None:
            stages[stage] = CandidateSet(notam.id, stage, tuple(kept))
    merged = consensus_aggregate(produced[-1], cfg)
    for f in merged:
        log.debug("%s relevance %s=%.2f", notam.id, f.name, domain_relevance(f))
    return CandidateSet(notam.id, "Z_MDA", tuple(merged), tuple(notes))
