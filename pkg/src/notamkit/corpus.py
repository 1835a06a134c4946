"""NOTAM ingestion: ICAO item parsing, Q-code decoding, JSONL corpora and statistics."""

from __future__ import annotations

import json
import re
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

from .errors import CorpusEmpty, EmptyInput, IoError, MalformedQCode


class _Permanent:
    """Sentinel for an item C of ``PERM``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "PERMANENT"

    def __reduce__(self):
        return (_Permanent, ())


PERMANENT = _Permanent()

UNKNOWN = "UNKNOWN"

# Q-code subject letter -> operational category.
QCODE_CATEGORIES = {
    "R": "Airspace Restrictions",
    "F": "Facilities and Services",
    "W": "Warning Information",
    "L": "Lighting Facilities",
    "M": "Movement Areas",
    "I": "Instrument Systems",
    "N": "Navigation Facilities",
    "A": "Airspace Organization",
    "P": "Flight Procedures",
}

# Subject letter -> one of the five operational domains used by the schemas.
QCODE_DOMAINS = {
    "R": "AirspaceManagement",
    "A": "AirspaceManagement",
    "P": "AirspaceManagement",
    "F": "GroundFacility",
    "N": "GroundFacility",
    "L": "LandingAid",
    "I": "LandingAid",
    "M": "RunwayTaxiway",
    "W": "FlightHazard",
}


@dataclass(frozen=True)
class QCode:
    raw: str
    subject_letter: str
    category_name: str

    @property
    def domain(self) -> Optional[str]:
        return QCODE_DOMAINS.get(self.subject_letter)


def decode_qcode(raw: str) -> QCode:
    """Decode a Q-code such as ``QRTCA`` into its subject category."""
    if not isinstance(raw, str):
        raise MalformedQCode(f"not a string: {raw!r}")
    code = raw.strip().upper()
    if len(code) < 2 or code[0] != "Q":
        raise MalformedQCode(f"Q-code must start with 'Q' and have a subject letter: {raw!r}")
    letter = code[1]
    return QCode(raw=code, subject_letter=letter, category_name=QCODE_CATEGORIES.get(letter, UNKNOWN))


Timestamp = datetime
ValidTo = Union[datetime, _Permanent, None]


@dataclass(frozen=True)
class NotamRecord:
    id: str
    raw_text: str
    body_text: str
    q_line: Optional[QCode] = None
    location: Optional[str] = None
    fir: Optional[str] = None
    valid_from: Optional[datetime] = None
    valid_to: ValidTo = None
    is_estimated_end: bool = False
    schedule_text: Optional[str] = None
    line_count: int = field(init=False)
    word_count: int = field(init=False)
    char_count: int = field(init=False)

    def __post_init__(self):
        if self.valid_to is PERMANENT and self.is_estimated_end:
            raise ValueError("a PERM notice cannot carry an EST end")
        if isinstance(self.valid_to, datetime) and self.valid_from is not None and self.valid_to < self.valid_from:
            raise ValueError(f"{self.id}: valid_to precedes valid_from")
        lines, words, chars = text_counts(self.raw_text)
        object.__setattr__(self, "line_count", lines)
        object.__setattr__(self, "word_count", words)
        object.__setattr__(self, "char_count", chars)

    @property
    def category(self) -> str:
        return self.q_line.category_name if self.q_line else UNKNOWN

    @property
    def validity_days(self) -> Optional[float]:
        if isinstance(self.valid_to, datetime) and self.valid_from is not None:
            return (self.valid_to - self.valid_from).total_seconds() / 86400.0
        return None

    def to_json(self) -> dict:
        """Corpus-line form; re-loading it through :func:`load_corpus` yields an equal record."""
        return {
            "id": self.id,
            "text": self.raw_text,
            "qcode": self.q_line.raw if self.q_line else None,
            "airport": self.location,
            "fir": self.fir,
            "valid_from": format_timestamp(self.valid_from),
            "valid_to": "PERM" if self.valid_to is PERMANENT else format_timestamp(self.valid_to),
        }


def text_counts(text: str) -> tuple[int, int, int]:
    """(lines, words, chars): newline-separated lines, whitespace tokens, all characters."""
    return text.count("\n") + 1, len(text.split()), len(text)


def format_timestamp(ts: Optional[datetime]) -> Optional[str]:
    if ts is None:
        return None
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_icao_time(token: str) -> Optional[datetime]:
    """YYMMDDHHMM in UTC; ``None`` when the digits do not form a valid instant."""
    if not re.fullmatch(r"\d{10}", token):
        return None
    try:
        return datetime.strptime(token, "%y%m%d%H%M").replace(tzinfo=timezone.utc)
    except ValueError:
        # ICAO allows 2400 for end of day
        if token[6:10] == "2400":
            try:
                day = datetime.strptime(token[:6], "%y%m%d").replace(tzinfo=timezone.utc)
            except ValueError:
                return None
            return day.replace(hour=23, minute=59)
        return None


def parse_timestamp(value) -> Optional[datetime]:
    """Accept ICAO 10-digit times and ISO-8601 strings (naive values are UTC)."""
    if value is None:
        return None
    if isinstance(value, datetime):
        return value if value.tzinfo else value.replace(tzinfo=timezone.utc)
    text = str(value).strip()
    if not text:
        return None
    icao = parse_icao_time(text)
    if icao is not None:
        return icao
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        return None
    return ts.astimezone(timezone.utc) if ts.tzinfo else ts.replace(tzinfo=timezone.utc)


# F) and G) close an E) item in real notices, so they are boundaries too.
_ITEM_RE = re.compile(r"(?:(?<=\s)|^)([QABCDEFG])\)", re.MULTILINE)


def split_items(text: str) -> dict[str, str]:
    """Map item letter -> content; content runs to the next marker. First occurrence wins."""
    marks = list(_ITEM_RE.finditer(text))
    items: dict[str, str] = {}
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        items.setdefault(m.group(1), text[m.end():end].strip())
    return items


def _parse_q_item(content: str) -> tuple[Optional[QCode], Optional[str]]:
    parts = [p.strip() for p in content.split("/")]
    fir = parts[0].upper() if parts and re.fullmatch(r"[A-Za-z]{4}", parts[0]) else None
    qcode = None
    for part in parts:
        if re.fullmatch(r"Q[A-Za-z]{2,4}", part, flags=re.IGNORECASE):
            qcode = decode_qcode(part)
            break
    return qcode, fir


def _parse_end(content: str) -> tuple[ValidTo, bool]:
    upper = content.upper()
    if upper.startswith("PERM"):
        return PERMANENT, False
    m = re.match(r"(\d{10})\s*(EST)?", upper)
    if not m:
        return None, False
    ts = parse_icao_time(m.group(1))
    return ts, bool(m.group(2)) and ts is not None


def parse_notam(id: str, text: str, overrides: Optional[dict] = None) -> NotamRecord:
    """Parse raw NOTAM text into a :class:`NotamRecord`.

    Unreadable items leave the matching attributes unset. ``overrides`` takes
    the optional corpus keys (qcode, airport, fir, valid_from, valid_to) and
    wins over parsed values.
    """
    if text is None or not str(text).strip():
        raise EmptyInput(f"NOTAM {id!r} has no text")
    items = split_items(text)

    qcode, fir = _parse_q_item(items["Q"]) if "Q" in items else (None, None)
    location = None
    if "A" in items:
        m = re.search(r"\b([A-Z]{4})\b", items["A"].upper())
        location = m.group(1) if m else None
    valid_from = None
    if "B" in items:
        m = re.match(r"(\d{10})", items["B"])
        valid_from = parse_icao_time(m.group(1)) if m else None
    valid_to, estimated = _parse_end(items["C"]) if "C" in items else (None, False)
    schedule = items.get("D") or None
    body = items["E"] if "E" in items else text.strip()

    if overrides:
        if overrides.get("qcode"):
            try:
                qcode = decode_qcode(overrides["qcode"])
            except MalformedQCode:
                pass
        if overrides.get("airport"):
            location = str(overrides["airport"]).upper()
        if overrides.get("fir"):
            fir = str(overrides["fir"]).upper()
        if overrides.get("valid_from"):
            valid_from = parse_timestamp(overrides["valid_from"]) or valid_from
        if overrides.get("valid_to"):
            raw_to = str(overrides["valid_to"]).strip()
            if raw_to.upper().startswith("PERM"):
                valid_to = PERMANENT
            else:
                valid_to = parse_timestamp(raw_to) or valid_to

    if valid_to is PERMANENT:
        estimated = False
    if isinstance(valid_to, datetime) and valid_from is not None and valid_to < valid_from:
        valid_to, estimated = None, False
    if valid_to is None:
        estimated = False

    return NotamRecord(
        id=id,
        raw_text=text,
        body_text=body,
        q_line=qcode,
        location=location,
        fir=fir,
        valid_from=valid_from,
        valid_to=valid_to,
        is_estimated_end=estimated,
        schedule_text=schedule,
    )


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str
    line: str


class Corpus(NamedTuple):
    records: list[NotamRecord]
    rejects: list[Reject]


def load_corpus(path) -> Corpus:
    """Read a corpus JSONL file. Malformed lines land in ``rejects`` with their 1-based line number."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read corpus {path}: {exc}") from exc

    records: list[NotamRecord] = []
    rejects: list[Reject] = []
    seen: set[str] = set()
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append(Reject(no, f"invalid JSON: {exc.msg}", line))
            continue
        if not isinstance(obj, dict):
            rejects.append(Reject(no, "line is not a JSON object", line))
            continue
        rid, text = obj.get("id"), obj.get("text")
        if not isinstance(rid, str) or not rid:
            rejects.append(Reject(no, "missing or non-string 'id'", line))
            continue
        if not isinstance(text, str) or not text.strip():
            rejects.append(Reject(no, "missing or empty 'text'", line))
            continue
        if rid in seen:
            rejects.append(Reject(no, f"duplicate id {rid!r}", line))
            continue
        seen.add(rid)
        records.append(parse_notam(rid, text, overrides=obj))
    if not records:
        raise CorpusEmpty(f"no valid records in {path}")
    return Corpus(records, rejects)


def write_corpus(records: Iterable[NotamRecord], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write corpus {path}: {exc}") from exc


@dataclass(frozen=True)
class CorpusStats:
    record_count: int
    category_counts: dict[str, int]
    airports: int
    firs: int
    qcode_types: int
    validity_count: int
    validity_mean_days: Optional[float]
    validity_min_days: Optional[float]
    validity_max_days: Optional[float]
    validity_median_days: Optional[float]
    mean_words: float
    mean_chars: float
    mean_lines: float
    min_words: int
    max_words: int
    min_chars: int
    max_chars: int

    def to_json(self) -> dict:
        return dict(self.__dict__)

    def render(self) -> str:
        def days(v):
            return "n/a" if v is None else f"{v:.1f} days"

        rows = [
            ("Records", str(self.record_count)),
            ("Q-code types", str(self.qcode_types)),
            ("Airports involved", str(self.airports)),
            ("FIRs involved", str(self.firs)),
            ("Average validity period", days(self.validity_mean_days)),
            ("Shortest validity period", days(self.validity_min_days)),
            ("Longest validity period", days(self.validity_max_days)),
            ("Median validity period", days(self.validity_median_days)),
            ("Average word count", f"{self.mean_words:.1f}"),
            ("Average character count", f"{self.mean_chars:.1f}"),
            ("Average line count", f"{self.mean_lines:.1f}"),
        ]
        for name, count in sorted(self.category_counts.items(), key=lambda kv: (-kv[1], kv[0])):
            rows.append((name, f"{count} ({100.0 * count / self.record_count:.2f}%)"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def compute_stats(records: list[NotamRecord]) -> CorpusStats:
    if not records:
        raise CorpusEmpty("cannot summarize an empty corpus")
    n = len(records)
    categories: dict[str, int] = {}
    for rec in records:
        categories[rec.category] = categories.get(rec.category, 0) + 1
    periods = [d for d in (r.validity_days for r in records) if d is not None]
    words = [r.word_count for r in records]
    chars = [r.char_count for r in records]
    return CorpusStats(
        record_count=n,
        category_counts=categories,
        airports=len({r.location for r in records if r.location}),
        firs=len({r.fir for r in records if r.fir}),
        qcode_types=len({r.q_line.raw[1:3] for r in records if r.q_line and len(r.q_line.raw) >= 3}),
        validity_count=len(periods),
        validity_mean_days=statistics.fmean(periods) if periods else None,
        validity_min_days=min(periods) if periods else None,
        validity_max_days=max(periods) if periods else None,
        validity_median_days=statistics.median(periods) if periods else None,
        mean_words=sum(words) / n,
        mean_chars=sum(chars) / n,
        mean_lines=sum(r.line_count for r in records) / n,
        min_words=min(words),
        max_words=max(words),
        min_chars=min(chars),
        max_chars=max(chars),
    )
