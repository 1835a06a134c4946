"""Hybrid debate refinement of discovered fields.

Each round, a consolidation expert proposes merges/removals and a terminology
expert proposes renames; a critic challenges or approves them; the
FieldManager then applies every unchallenged proposal by fixed rules.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from ._assets import prompt
from .discovery import CandidateSet, EmergentField, call_agent, merge_fields, union_sources
from .errors import GatewayError, InvalidJson, NotamkitError, StageError, UnknownFieldReference
from .gateway import DEFAULT_MODEL, Backend, PromptRequest
from .strategies import extract_json

log = logging.getLogger(__name__)

ACTIONS = ("merge", "remove", "rename")
STRUCTURAL = frozenset({"merge", "remove"})


@dataclass(frozen=True)
class Proposal:
    action: str
    reason: str = ""
    confidence: float = 0.5
    origin: str = "consolidation"
    fields_to_merge: tuple[str, ...] = ()
    new_field_name: Optional[str] = None
    old_field_name: Optional[str] = None
    target_field: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "fields_to_merge", tuple(self.fields_to_merge))
        if self.action not in ACTIONS:
            raise ValueError(f"unknown proposal action {self.action!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.origin not in ("consolidation", "terminology"):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.action == "merge" and len(set(self.fields_to_merge)) < 2:
            raise ValueError("merge needs at least two distinct fields")
        if self.action == "rename" and not (self.old_field_name and self.new_field_name):
            raise ValueError("rename needs old_field_name and new_field_name")
        if self.action == "remove" and not self.target_field:
            raise ValueError("remove needs target_field")

    @property
    def tier(self) -> int:
        """0 for structural (merge/remove), 1 for terminological (rename)."""
        return 0 if self.action in STRUCTURAL else 1

    def references(self) -> tuple[str, ...]:
        if self.action == "merge":
            return self.fields_to_merge
        if self.action == "rename":
            return (self.old_field_name,)
        return (self.target_field,)

    def to_json(self) -> dict:
        out: dict = {"action": self.action}
        if self.action == "merge":
            out["fields_to_merge"] = list(self.fields_to_merge)
            if self.new_field_name:
                out["new_field_name"] = self.new_field_name
        elif self.action == "rename":
            out["old_field_name"] = self.old_field_name
            out["new_field_name"] = self.new_field_name
        else:
            out["target_field"] = self.target_field
        out.update(reason=self.reason, confidence=self.confidence, origin=self.origin)
        return out

    @classmethod
    def from_json(cls, obj: dict, origin: Optional[str] = None) -> "Proposal":
        return cls(
            action=str(obj["action"]).lower(),
            reason=str(obj.get("reason", "")),
            confidence=float(obj.get("confidence", 0.5)),
            origin=origin or obj.get("origin", "consolidation"),
            fields_to_merge=tuple(str(n) for n in obj.get("fields_to_merge") or ()),
            new_field_name=obj.get("new_field_name"),
            old_field_name=obj.get("old_field_name"),
            target_field=obj.get("target_field"),
        )


@dataclass(frozen=True)
class Critique:
    action: str
    target_proposal: int
    reason: str = ""
    confidence: float = 0.5

    def __post_init__(self):
        if self.action not in ("challenge", "approve"):
            raise ValueError(f"unknown critique action {self.action!r}")
        if isinstance(self.target_proposal, bool) or not isinstance(self.target_proposal, int):
            raise ValueError("target_proposal must be an integer index")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "action": self.action,
            "target_proposal": self.target_proposal,
            "reason": self.reason,
            "confidence": self.confidence,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Critique":
        return cls(
            action=str(obj["action"]).lower(),
            target_proposal=int(obj["target_proposal"]),
            reason=str(obj.get("reason", "")),
            confidence=float(obj.get("confidence", 0.5)),
        )


@dataclass(frozen=True)
class DebateConfig:
    max_iterations: int = 5
    quiescent_rounds_to_stop: int = 1

    def __post_init__(self):
        if self.max_iterations < 1 or self.quiescent_rounds_to_stop < 1:
            raise ValueError("max_iterations and quiescent_rounds_to_stop must be >= 1")


# -- FieldManager ------------------------------------------------------------

def accepted_indices(proposals: Sequence[Proposal], critiques: Sequence[Critique]) -> list[int]:
    """Unchallenged proposals in application order: structural first, then higher confidence, then list order."""
    for c in critiques:
        if not 0 <= c.target_proposal < len(proposals):
            raise IndexError(f"critique targets proposal {c.target_proposal}, only {len(proposals)} exist")
    challenged = {c.target_proposal for c in critiques if c.action == "challenge"}
    keep = [i for i in range(len(proposals)) if i not in challenged]
    return sorted(keep, key=lambda i: (proposals[i].tier, -proposals[i].confidence, i))


def _apply_one(p: Proposal, current: list[EmergentField]) -> list[EmergentField]:
    names = {f.name for f in current}
    missing = [n for n in p.references() if n not in names]
    if missing:
        raise UnknownFieldReference(f"{p.action} references unknown field(s) {missing}")
    if p.action == "rename":
        return [replace(f, name=p.new_field_name) if f.name == p.old_field_name else f for f in current]
    if p.action == "remove":
        return [f for f in current if f.name != p.target_field]
    members = set(p.fields_to_merge)
    group = [f for f in current if f.name in members]
    merged = merge_fields(group, name=p.new_field_name or None)
    out, placed = [], False
    for f in current:
        if f.name in members:
            if not placed:
                out.append(merged)
                placed = True
        else:
            out.append(f)
    return out


def field_manager_apply(
    proposals: Sequence[Proposal],
    critiques: Sequence[Critique],
    fields: Sequence[EmergentField],
    notes: Optional[list] = None,
) -> list[EmergentField]:
    """Apply every unchallenged proposal deterministically.

    Accepted proposals run in priority order against the evolving field
    list. One that names a field no longer present (consumed by an earlier
    merge, rename or removal) is skipped and noted.
    """
    current = list(fields)
    for i in accepted_indices(proposals, critiques):
        try:
            current = _apply_one(proposals[i], current)
        except UnknownFieldReference as exc:
            if notes is not None:
                notes.append(f"proposal {i} skipped: {exc}")
    return current


# -- post-processing ---------------------------------------------------------

def snake_case(name: str) -> str:
    spaced = re.sub(r"(?<=[a-z0-9])(?=[A-Z])", "_", name.strip())
    return re.sub(r"[^0-9A-Za-z]+", "_", spaced).strip("_").lower()


def post_process(fields: Sequence[EmergentField], warnings: Optional[list] = None) -> list[EmergentField]:
    """Normalize names to lower_snake_case, fold exact-name duplicates, dedupe sources, flag gaps."""
    groups: dict[str, list[EmergentField]] = {}
    for f in fields:
        groups.setdefault(snake_case(f.name) or f.name, []).append(f)
    out = []
    for name, group in groups.items():
        head = group[0]
        sources = union_sources(group)
        origin = head.origin_agent if len(group) == 1 else "merged"
        out.append(replace(head, name=name, sources=sources, origin_agent=origin))
    for f in out:
        for attr in ("description", "value"):
            if not getattr(f, attr).strip():
                msg = f"field {f.name!r} has an empty {attr}"
                log.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
    return out


# -- transcript --------------------------------------------------------------

@dataclass
class IterationRecord:
    index: int
    proposals: list[Proposal]
    critiques: list[Critique]
    accepted: list[int]
    fields: list[EmergentField]
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "proposals": [p.to_json() for p in self.proposals],
            "critiques": [c.to_json() for c in self.critiques],
            "accepted": list(self.accepted),
            "fields": [f.to_json() for f in self.fields],
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IterationRecord":
        return cls(
            index=obj["index"],
            proposals=[Proposal.from_json(p) for p in obj["proposals"]],
            critiques=[Critique.from_json(c) for c in obj["critiques"]],
            accepted=list(obj["accepted"]),
            fields=[EmergentField.from_json(f) for f in obj["fields"]],
            notes=list(obj.get("notes", ())),
        )


@dataclass
class DebateTranscript:
    notam_id: str
    max_iterations: int
    quiescent_rounds_to_stop: int
    initial_fields: list[EmergentField]
    iterations: list[IterationRecord] = field(default_factory=list)
    refined_fields: list[EmergentField] = field(default_factory=list)
    final_fields: list[EmergentField] = field(default_factory=list)
    stop_reason: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "notam_id": self.notam_id,
            "max_iterations": self.max_iterations,
            "quiescent_rounds_to_stop": self.quiescent_rounds_to_stop,
            "initial_fields": [f.to_json() for f in self.initial_fields],
            "iterations": [it.to_json() for it in self.iterations],
            "refined_fields": [f.to_json() for f in self.refined_fields],
            "final_fields": [f.to_json() for f in self.final_fields],
            "stop_reason": self.stop_reason,
            "warnings": list(self.warnings),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> "DebateTranscript":
        fields = lambda key: [EmergentField.from_json(f) for f in obj.get(key, ())]  # noqa: E731
        return cls(
            notam_id=obj["notam_id"],
            max_iterations=obj["max_iterations"],
            quiescent_rounds_to_stop=obj["quiescent_rounds_to_stop"],
            initial_fields=fields("initial_fields"),
            iterations=[IterationRecord.from_json(it) for it in obj.get("iterations", ())],
            refined_fields=fields("refined_fields"),
            final_fields=fields("final_fields"),
            stop_reason=obj.get("stop_reason", ""),
            warnings=list(obj.get("warnings", ())),
        )


def replay_transcript(transcript: DebateTranscript) -> list[EmergentField]:
    """Fold the FieldManager over the recorded rounds; equals ``refined_fields`` for an intact transcript."""
    current = list(transcript.initial_fields)
    for it in transcript.iterations:
        current = field_manager_apply(it.proposals, it.critiques, current)
    return current


# -- agents ------------------------------------------------------------------

def _fields_block(fields: Sequence[EmergentField]) -> str:
    rows = [{"name": f.name, "description": f.description, "value": f.value, "sources": list(f.sources)} for f in fields]
    return "Current fields:\n" + json.dumps(rows, ensure_ascii=False, indent=1)


def expert_request(role: str, fields: Sequence[EmergentField], model_id: str = DEFAULT_MODEL) -> PromptRequest:
    template = {"consolidation": "consolidation_expert", "terminology": "terminology_expert"}[role]
    return PromptRequest(prompt(template), _fields_block(fields), temperature=0.0, model_id=model_id)


def critic_request(
    proposals: Sequence[Proposal], fields: Sequence[EmergentField], model_id: str = DEFAULT_MODEL
) -> PromptRequest:
    numbered = [dict(index=i, **p.to_json()) for i, p in enumerate(proposals)]
    user = _fields_block(fields) + "\n\nProposals:\n" + json.dumps(numbered, ensure_ascii=False, indent=1)
    return PromptRequest(prompt("critic"), user, temperature=0.0, model_id=model_id)


def _json_array(text: str) -> list:
    obj = extract_json(text)
    if isinstance(obj, dict):
        obj = [obj]
    if not isinstance(obj, list):
        raise InvalidJson("expected a JSON array")
    return obj


def parse_proposals(text: str, origin: str) -> tuple[list[Proposal], list[str]]:
    out, notes = [], []
    for item in _json_array(text):
        try:
            out.append(Proposal.from_json(item, origin))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            notes.append(f"{origin}: ignored proposal {str(item)[:60]!r} ({exc})")
    return out, notes


def parse_critiques(text: str, n_proposals: int) -> tuple[list[Critique], list[str]]:
    out, notes = [], []
    for item in _json_array(text):
        try:
            c = Critique.from_json(item)
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            notes.append(f"critic: ignored critique {str(item)[:60]!r} ({exc})")
            continue
        if not 0 <= c.target_proposal < n_proposals:
            notes.append(f"critic: ignored critique of nonexistent proposal {c.target_proposal}")
            continue
        out.append(c)
    return out, notes


def _propose(backend: Backend, fields: Sequence[EmergentField], model_id: str):
    reqs = [expert_request("consolidation", fields, model_id), expert_request("terminology", fields, model_id)]
    completions = backend.complete_batch(reqs, max_in_flight=2)
    proposals, notes = [], []
    for role, req, comp in zip(("consolidation", "terminology"), reqs, completions):
        stage = f"{role}_expert"
        if not comp.ok:
            raise StageError(stage, comp.exception or GatewayError(comp.error))
        parse = lambda t, r=role: parse_proposals(t, r)  # noqa: E731
        try:
            found, n = parse(comp.text)
        except NotamkitError:
            found, n = call_agent(backend, replace(req, user_text=req.user_text + "\n\nReturn valid JSON only."), parse, stage)
        proposals.extend(found)
        notes.extend(n)
    return proposals, notes


def run_hdf(
    initial: CandidateSet,
    backend: Backend,
    cfg: DebateConfig = DebateConfig(),
    model_id: str = DEFAULT_MODEL,
) -> tuple[CandidateSet, DebateTranscript]:
    """Propose -> critique -> consolidate until quiet or ``max_iterations``; then post-process.

    The loop always runs at least once. A round without proposals skips the
    critic and counts toward quiescence. Agent failures raise
    :class:`StageError` with the transcript so far in ``partial``.
    """
    if initial.stage != "Z_MDA":
        raise ValueError(f"debate starts from Z_MDA, got {initial.stage}")
    transcript = DebateTranscript(
        initial.notam_id, cfg.max_iterations, cfg.quiescent_rounds_to_stop, list(initial.fields)
    )
    current = list(initial.fields)
    quiet = 0
    transcript.stop_reason = "max_iterations"
    for index in range(cfg.max_iterations):
        try:
            proposals, notes = _propose(backend, current, model_id)
            critiques: list[Critique] = []
            if proposals:
                critiques, crit_notes = call_agent(
                    backend,
                    critic_request(proposals, current, model_id),
                    lambda t, n=len(proposals): parse_critiques(t, n),
                    "critic",
                )
                notes.extend(crit_notes)
        except StageError as exc:
            exc.partial = transcript
            raise
        except NotamkitError as exc:
            raise StageError(f"iteration {index + 1}", exc, partial=transcript) from exc

        accepted = accepted_indices(proposals, critiques)
        current = field_manager_apply(proposals, critiques, current, notes)
        transcript.iterations.append(IterationRecord(index + 1, proposals, critiques, accepted, list(current), notes))
        quiet = 0 if proposals else quiet + 1
        if quiet >= cfg.quiescent_rounds_to_stop:
            transcript.stop_reason = "quiescent"
            break

    transcript.refined_fields = list(current)
    transcript.final_fields = post_process(current, transcript.warnings)
    return CandidateSet(initial.notam_id, "Z_MDA", tuple(transcript.final_fields)), transcript
