"""Scoring, keyword baselines and parameter sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence, Union

from ._assets import read_asset
from .corpus import NotamRecord
from .discovery import AggregatorConfig, EmergentField, jaccard_sets, name_tokens, run_mda, similarity_components
from .errors import CorpusEmpty, KeyCollision
from .gateway import Backend
from .schema import ExtractionResult, FieldSchema, _hashable, builtin_schemas, map_lighting_keyword, normalize_record, validate_result
from .strategies import StrategyConfig, run_extraction

SWEEP_PARAMETERS = ("tau", "shots", "temperature")
CSV_HEADER = ("parameter", "precision", "recall", "f1", "avg")


# -- reports -----------------------------------------------------------------

def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, tp: int = 0, fp: int = 0, fn: int = 0) -> None:
        self.tp += tp
        self.fp += fp
        self.fn += fn

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass
class EvalReport:
    mode: str
    totals: Counts
    per_domain: dict[str, Counts] = field(default_factory=dict)
    per_field: dict[str, Counts] = field(default_factory=dict)
    documents: int = 0
    avg_fields_per_doc: Optional[float] = None
    notes: list[str] = field(default_factory=list)

    precision = property(lambda self: self.totals.precision)
    recall = property(lambda self: self.totals.recall)
    f1 = property(lambda self: self.totals.f1)
    tp = property(lambda self: self.totals.tp)
    fp = property(lambda self: self.totals.fp)
    fn = property(lambda self: self.totals.fn)

    def to_json(self) -> dict:
        out = {"mode": self.mode, "documents": self.documents, **self.totals.to_json()}
        if self.avg_fields_per_doc is not None:
            out["avg_fields_per_doc"] = self.avg_fields_per_doc
        out["per_domain"] = {k: v.to_json() for k, v in sorted(self.per_domain.items())}
        out["per_field"] = {k: v.to_json() for k, v in sorted(self.per_field.items())}
        out["notes"] = list(self.notes)
        return out

    def render(self) -> str:
        lines = [f"mode: {self.mode}    documents: {self.documents}"]
        if self.avg_fields_per_doc is not None:
            lines.append("avg = predicted fields per document (lower is terser)")
        header = ("", "prec", "rec", "f1", "tp", "fp", "fn")
        rows = [("ALL", self.totals)]
        rows += [(f"domain:{k}", v) for k, v in sorted(self.per_domain.items())]
        rows += [(f"field:{k}", v) for k, v in sorted(self.per_field.items())]
        width = max(len(header[0]), *(len(name) for name, _ in rows))
        lines.append(f"{header[0]:<{width}}  {'prec':>7} {'rec':>7} {'f1':>7} {'tp':>6} {'fp':>6} {'fn':>6}")
        for name, c in rows:
            lines.append(
                f"{name:<{width}}  {c.precision:7.4f} {c.recall:7.4f} {c.f1:7.4f} {c.tp:6d} {c.fp:6d} {c.fn:6d}"
            )
        if self.avg_fields_per_doc is not None:
            lines.append(f"avg fields/doc: {self.avg_fields_per_doc:.2f}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


# -- extraction scoring ------------------------------------------------------

def _index(results: Sequence[ExtractionResult], label: str) -> dict[tuple[str, str], ExtractionResult]:
    out = {}
    for r in results:
        key = (r.notam_id, r.schema_id)
        if key in out:
            raise KeyCollision(f"duplicate {label} entry for notam {r.notam_id!r} ({r.schema_id})")
        out[key] = r
    return out


def _entities(record: dict) -> set[tuple[str, object]]:
    return {(k, _hashable(v)) for k, v in record.items() if v is not None}


def _keyed(records: Sequence[dict], schema: Optional[FieldSchema]) -> dict[tuple, dict]:
    out, seen = {}, Counter()
    for pos, rec in enumerate(records):
        base = schema.record_key(rec) if schema and schema.key_fields else (pos,)
        out[(base, seen[base])] = rec
        seen[base] += 1
    return out


def score_extraction(
    pred: Sequence[ExtractionResult],
    gold: Sequence[ExtractionResult],
    schemas: Optional[Mapping[str, FieldSchema]] = None,
) -> EvalReport:
    """Strict entity-level micro P/R/F1.

    An entity is one non-null (field, normalized value) pair of a record.
    Predicted records are aligned to gold records through the schema's record
    key; a predicted entity is a true positive only if the aligned gold record
    holds the identical value.
    """
    schemas = dict(builtin_schemas()) if schemas is None else dict(schemas)
    gold_ix = _index(gold, "gold")
    pred_ix = _index(pred, "pred")
    stray = sorted(k for k in pred_ix if k not in gold_ix)
    if stray:
        raise KeyCollision(f"{len(stray)} predicted notices have no gold entry, e.g. {stray[0][0]!r}")

    totals, per_domain, per_field = Counts(), {}, {}

    def count(schema: Optional[FieldSchema], name: str, **kw) -> None:
        totals.add(**kw)
        per_field.setdefault(name, Counts()).add(**kw)
        domain = schema.domain if schema else "unknown"
        per_domain.setdefault(domain, Counts()).add(**kw)

    for key, g in gold_ix.items():
        schema = schemas.get(g.schema_id)
        p = pred_ix.get(key)
        g_recs = _keyed(g.records, schema)
        p_recs = _keyed(p.records if p else [], schema)
        for rk in set(g_recs) | set(p_recs):
            g_ent = _entities(g_recs.get(rk, {}))
            p_ent = _entities(p_recs.get(rk, {}))
            for name, _ in p_ent & g_ent:
                count(schema, name, tp=1)
            for name, _ in p_ent - g_ent:
                count(schema, name, fp=1)
            for name, _ in g_ent - p_ent:
                count(schema, name, fn=1)
    return EvalReport("extraction", totals, per_domain, per_field, documents=len(gold_ix))


# -- discovery scoring -------------------------------------------------------

def _normalized_name(name: str) -> str:
    return "_".join(w for w in re.split(r"[^0-9a-z]+", name.lower()) if w)


def name_similarity(a: str, b: str) -> float:
    return jaccard_sets(name_tokens(a), name_tokens(b))


def greedy_match(pred_names: Sequence[str], gold_names: Sequence[str], threshold: float = 0.5) -> list[tuple[int, int]]:
    """One-to-one matching taking eligible pairs in descending name-token Jaccard (ties by index)."""
    pairs = []
    for i, p in enumerate(pred_names):
        for j, g in enumerate(gold_names):
            sim = name_similarity(p, g)
            if sim >= threshold or _normalized_name(p) == _normalized_name(g):
                pairs.append((-sim, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), []
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            out.append((i, j))
    return out


DocFields = Union[Mapping[str, Sequence[EmergentField]], Sequence[Sequence[EmergentField]]]


def _as_docs(docs: DocFields) -> dict:
    return dict(docs) if isinstance(docs, Mapping) else dict(enumerate(docs))


def _names(fields) -> list[str]:
    return [f.name if isinstance(f, EmergentField) else str(f) for f in fields]


def score_discovery(pred: DocFields, gold: DocFields, match_threshold: float = 0.5) -> EvalReport:
    """Matching-based P/R/F1 over emergent field names, per document then pooled."""
    pred_d, gold_d = _as_docs(pred), _as_docs(gold)
    docs = list(gold_d) + [k for k in pred_d if k not in gold_d]
    totals = Counts()
    n_pred = 0
    for doc in docs:
        p, g = _names(pred_d.get(doc, ())), _names(gold_d.get(doc, ()))
        tp = len(greedy_match(p, g, match_threshold))
        totals.add(tp=tp, fp=len(p) - tp, fn=len(g) - tp)
        n_pred += len(p)
    avg = n_pred / len(docs) if docs else 0.0
    return EvalReport("discovery", totals, documents=len(docs), avg_fields_per_doc=avg)


# -- keyword baselines -------------------------------------------------------

@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    words = (ln.strip().lower() for ln in read_asset("stopwords.txt").splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


_WORD_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9/\-]*")
_DELIM_RE = re.compile(r"[.,;:!?()\[\]\"'\n\r\t]+")


def rake_keywords(text: str, top_k: int = 10, stopwords: Optional[set] = None) -> list[tuple[str, float]]:
    """RAKE: phrases are runs of non-stopwords; score = sum of degree/frequency of their words."""
    stop = default_stopwords() if stopwords is None else {w.lower() for w in stopwords}
    phrases: list[list[str]] = []
    for chunk in _DELIM_RE.split(text or ""):
        current: list[str] = []
        for word in _WORD_RE.findall(chunk):
            if word.lower() in stop:
                if current:
                    phrases.append(current)
                current = []
            else:
                current.append(word)
        if current:
            phrases.append(current)
    freq, degree = Counter(), Counter()
    for ph in phrases:
        for w in ph:
            freq[w.lower()] += 1
            degree[w.lower()] += len(ph)
    scored: dict[str, tuple[float, int, str]] = {}
    for pos, ph in enumerate(phrases):
        key = " ".join(w.lower() for w in ph)
        if key not in scored:
            score = sum(degree[w.lower()] / freq[w.lower()] for w in ph)
            scored[key] = (score, pos, " ".join(ph))
    ranked = sorted(scored.values(), key=lambda t: (-t[0], t[1]))
    return [(phrase, score) for score, _, phrase in ranked[:top_k]]


def _terms(text: str) -> list[str]:
    return [w.lower() for w in _WORD_RE.findall(text or "")]


def tfidf_keywords(corpus: Sequence[str], doc: str, top_k: int = 10) -> list[tuple[str, float]]:
    """Raw term count times ln(N/df). ``doc`` joins the corpus when it is not already part of it."""
    docs = list(corpus)
    if not docs:
        raise CorpusEmpty("TF-IDF needs a non-empty corpus")
    if doc not in docs:
        docs.append(doc)
    n = len(docs)
    df = Counter(t for d in docs for t in set(_terms(d)))
    tf = Counter(_terms(doc))
    scored = [(t, c * math.log(n / df[t])) for t, c in tf.items()]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored[:top_k]


@lru_cache(maxsize=None)
def regex_patterns() -> dict:
    return json.loads(read_asset("regex_patterns.json"))


def _substitute(template: str, match: re.Match) -> str:
    return re.sub(r"\$(\d+)", lambda m: match.group(int(m.group(1))) or "", template)


def regex_baseline(notam: Union[NotamRecord, str], schema: FieldSchema, notam_id: str = "") -> ExtractionResult:
    """Surface-pattern extraction: captures only what is literally written."""
    if isinstance(notam, NotamRecord):
        text, notam_id, airport = notam.body_text, notam.id, notam.location
    else:
        text, airport = notam or "", None
    records = []
    names = set(schema.field_names)
    for spec in regex_patterns().get(schema.schema_id, ()):
        for m in re.finditer(spec["pattern"], text.upper()):
            rec = {k: _substitute(v, m) if isinstance(v, str) else v for k, v in spec["fields"].items()}
            if "lightcategory" in rec:
                rec["lightcategory"] = map_lighting_keyword(rec["lightcategory"]) or rec["lightcategory"]
            if airport and "airport" in names:
                rec.setdefault("airport", airport)
            records.append(normalize_record(schema, rec))
    result = ExtractionResult(notam_id, schema.schema_id, records)
    result.violations = validate_result(result, schema)
    return result


# -- sweeps ------------------------------------------------------------------

@dataclass
class SweepResult:
    parameter: str
    points: list[tuple[float, EvalReport]]

    def __post_init__(self):
        values = [v for v, _ in self.points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"sweep values must be strictly increasing: {values}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for value, rep in self.points:
            avg = "" if rep.avg_fields_per_doc is None else f"{rep.avg_fields_per_doc:.6f}"
            w.writerow([_fmt_value(value), f"{rep.precision:.6f}", f"{rep.recall:.6f}", f"{rep.f1:.6f}", avg])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"parameter": self.parameter, "points": [{"value": v, "report": r.to_json()} for v, r in self.points]}

    def render(self) -> str:
        lines = [f"{self.parameter:>11}  {'prec':>7} {'rec':>7} {'f1':>7}"]
        for v, r in self.points:
            lines.append(f"{_fmt_value(v):>11}  {r.precision:7.4f} {r.recall:7.4f} {r.f1:7.4f}")
        return "\n".join(lines)


def _fmt_value(v) -> str:
    return f"{v:g}"


def sweep(parameter: str, values: Sequence[float], run: Callable[[float], EvalReport]) -> SweepResult:
    """Call ``run`` once per value, in the given (strictly increasing) order."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"sweep values must be strictly increasing: {values}")
    if parameter == "tau" and not all(0 < v <= 1 for v in values):
        raise ValueError("tau values must lie in (0, 1]")
    if parameter == "shots" and not all(float(v).is_integer() and v >= 0 for v in values):
        raise ValueError("shots values must be non-negative integers")
    if parameter == "temperature" and not all(0 <= v <= 2 for v in values):
        raise ValueError("temperature values must lie in [0, 2]")
    return SweepResult(parameter, [(v, run(v)) for v in values])


def sweep_extraction(
    parameter: str,
    values: Sequence[float],
    records: Sequence[NotamRecord],
    gold: Sequence[ExtractionResult],
    schema: FieldSchema,
    base: StrategyConfig,
    backend: Backend,
    bank=(),
    max_in_flight: int = 1,
) -> SweepResult:
    """Shot-count or temperature sweep with every other setting held at ``base``."""

    def cfg_for(v):
        if parameter == "shots":
            kind = base.kind if base.kind in ("icl", "cot") else "icl"
            return replace(base, kind=kind, shots=int(v))
        if parameter == "temperature":
            return replace(base, kind="self_consistency", sc_temperatures=(float(v),))
        raise ValueError(f"extraction sweeps take shots or temperature, not {parameter!r}")

    def run(v):
        preds = run_extraction(records, schema, cfg_for(v), backend, bank, max_in_flight)
        return score_extraction(preds, gold, {schema.schema_id: schema})

    return sweep(parameter, values, run)


def sweep_tau_discovery(
    values: Sequence[float],
    records: Sequence[NotamRecord],
    gold: DocFields,
    backend: Backend,
    match_threshold: float = 0.5,
) -> SweepResult:
    """Rerun MDA (aggregation threshold varied) on each notice and score against gold fields."""

    def run(v):
        pred = {r.id: list(run_mda(r, backend, AggregatorConfig(v)).fields) for r in records}
        return score_discovery(pred, gold, match_threshold)

    return sweep("tau", values, run)


# -- synthetic duplicate benchmark ------------------------------------------

@dataclass(frozen=True)
class DuplicateBenchmark:
    fields: tuple[EmergentField, ...]
    labels: tuple[int, ...]


def _word(rng: random.Random) -> str:
    consonants, vowels = "bcdfgklmnprtvz", "aeiou"
    return "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(3))


def duplicate_benchmark(clusters: int = 50, seed: int = 42) -> DuplicateBenchmark:
    """Seeded set of candidate fields with known duplicate clusters.

    Clusters come in related pairs sharing part of their vocabulary, so low
    thresholds over-merge across a pair while high thresholds split
    paraphrased duplicates apart.
    """
    rng = random.Random(seed)
    vocab: list[str] = []
    seen = set()
    while len(vocab) < clusters * 12:
        w = _word(rng)
        if w not in seen:
            seen.add(w)
            vocab.append(w)
    pool = iter(vocab)
    cores: list[list[str]] = []
    for c in range(clusters):
        if c % 2 and rng.random() < 0.8:
            shared = rng.sample(cores[-1], rng.randint(5, 6))
            cores.append(shared + [next(pool) for _ in range(8 - len(shared))])
        else:
            cores.append([next(pool) for _ in range(8)])
    fields, labels = [], []
    for c, core in enumerate(cores):
        for k in range(rng.randint(2, 4)):
            toks = list(core)
            if k:
                for _ in range(rng.choice((0, 1, 1, 2))):
                    toks.remove(rng.choice(toks))
                toks += [next(pool) for _ in range(rng.randint(0, 1))]
            name = "_".join(toks[:2])
            fields.append(EmergentField(name, " ".join(toks[2:]), "", (f"c{c}m{k}",), "validation"))
            labels.append(c)
    return DuplicateBenchmark(tuple(fields), tuple(labels))


def pairwise_counts(components: Sequence[Sequence[int]], labels: Sequence[int]) -> Counts:
    """Same-cluster pair counts of a predicted partition against true labels."""
    comp_of = {i: n for n, comp in enumerate(components) for i in comp}
    counts = Counts()
    n = len(labels)
    for i in range(n):
        for j in range(i + 1, n):
            same_pred = comp_of[i] == comp_of[j]
            same_gold = labels[i] == labels[j]
            if same_pred and same_gold:
                counts.tp += 1
            elif same_pred:
                counts.fp += 1
            elif same_gold:
                counts.fn += 1
    return counts


def sweep_tau_benchmark(values: Sequence[float], clusters: int = 50, seed: int = 42) -> SweepResult:
    bench = duplicate_benchmark(clusters, seed)

    def run(v):
        comps = similarity_components(bench.fields, v)
        counts = pairwise_counts(comps, bench.labels)
        return EvalReport("tau_benchmark", counts, documents=1, avg_fields_per_doc=float(len(comps)))

    return sweep("tau", values, run)


# -- splitting ---------------------------------------------------------------

def split_corpus(records: Sequence, seed: int = 42, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)):
    """Seeded shuffle into train/dev/test; rounding remainder goes to train."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    order = list(range(len(records)))
    random.Random(seed).shuffle(order)
    n = len(records)
    n_dev, n_test = int(n * ratios[1]), int(n * ratios[2])
    n_train = n - n_dev - n_test
    pick = lambda idx: [records[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train : n_train + n_dev]), pick(order[n_train + n_dev :])
