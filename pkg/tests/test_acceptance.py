"""Acceptance criteria, one test group per criterion.

Every test runs offline against mock or replay backends; a socket stub turns
any accidental network use into a failure.
"""

import json
import math
import random
import re
import socket
import time
from functools import lru_cache

import pytest
import scripted

from notamkit.corpus import PERMANENT, compute_stats, load_corpus, parse_notam, write_corpus
from notamkit.debate import (
    DebateConfig,
    Critique,
    Proposal,
    field_manager_apply,
    run_hdf,
)
from notamkit.discovery import AggregatorConfig, CandidateSet, EmergentField, consensus_aggregate, run_mda
from notamkit.evalkit import f1_score, greedy_match, name_similarity, score_extraction, sweep_extraction, sweep_tau_benchmark
from notamkit.gateway import MockBackend, RecordingBackend, ReplayBackend
from notamkit.schema import ExtractionResult, builtin_schemas, get_schema, grade_als, map_lighting_keyword
from notamkit.strategies import (
    StrategyConfig,
    apply_srcv,
    builtin_bank,
    builtin_srcv_rules,
    parse_output,
    run_extraction,
    self_consistency_vote,
)


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def criterion(number, description):
    return pytest.mark.criterion(number, description)


# -- 1 ------------------------------------------------------------------------

@criterion(1, "scripted discovery is byte-identical over 100 runs in under 5 s")
def test_scripted_discovery_deterministic():
    start = time.perf_counter()
    outputs = set()
    for _ in range(100):
        z = run_mda(scripted.notam(), scripted.backend())
        final, transcript = run_hdf(z, scripted.backend())
        outputs.add((json.dumps([f.to_json() for f in final.fields], sort_keys=True), transcript.dumps()))
    elapsed = time.perf_counter() - start
    assert len(outputs) == 1
    fields_json, _ = outputs.pop()
    assert json.loads(fields_json) == scripted.EXPECTED_FINAL
    assert elapsed < 5.0


# -- 2 ------------------------------------------------------------------------

def _field(name, desc="d"):
    return EmergentField(name, desc, "v", (name.upper(),), "validation")


def _z(*fields):
    return CandidateSet("n", "Z_MDA", tuple(fields))


def _first_name(req):
    return re.search(r'"name": "([^"]+)"', req.user_text).group(1)


@criterion(2, "debate stops at 5 iterations under endless proposals; a full veto keeps input")
def test_debate_stops_at_max_iterations():
    mock = MockBackend()
    mock.add_rule(lambda r: json.dumps([{"action": "rename", "old_field_name": _first_name(r),
                                         "new_field_name": _first_name(r) + "_x", "confidence": 0.9}]),
                  contains="terminology expert")
    mock.add_rule("[]", contains="merging expert")
    mock.add_rule("[]", contains="You are the Critic")
    final, t = run_hdf(_z(_field("alpha"), _field("bravo")), mock)
    assert len(t.iterations) == 5 and t.stop_reason == "max_iterations"
    assert [f.name for f in final.fields] == ["alpha_x_x_x_x_x", "bravo"]


@criterion(2, "debate stops at 5 iterations under endless proposals; a full veto keeps input")
def test_debate_full_veto_is_identity():
    def challenge_all(req):
        count = req.user_text.count('"index"')
        return json.dumps([{"action": "challenge", "target_proposal": i} for i in range(count)])

    mock = MockBackend()
    mock.add_rule(json.dumps([{"action": "merge", "fields_to_merge": ["alpha", "bravo"], "confidence": 0.8},
                              {"action": "remove", "target_field": "charlie"}]), contains="merging expert")
    mock.add_rule(json.dumps([{"action": "rename", "old_field_name": "alpha", "new_field_name": "a"}]),
                  contains="terminology expert")
    mock.add_rule(challenge_all, contains="You are the Critic")
    fields = (_field("alpha"), _field("bravo"), _field("charlie"))
    final, t = run_hdf(_z(*fields), mock)
    assert final.fields == fields and t.refined_fields == list(fields)
    assert len(t.iterations) == 5 and all(it.accepted == [] for it in t.iterations)


# -- 3 ------------------------------------------------------------------------
# Oracle state: a list of slots, each a name plus the set of original field
# indices it covers and its description.

def oracle_apply(proposals, critiques, fields):
    challenged = set()
    for c in critiques:
        if c.action == "challenge":
            challenged.add(c.target_proposal)
    structural = [i for i in range(len(proposals)) if i not in challenged and proposals[i].action != "rename"]
    renames = [i for i in range(len(proposals)) if i not in challenged and proposals[i].action == "rename"]
    order = []
    for bucket in (structural, renames):
        for conf in sorted({proposals[i].confidence for i in bucket}, reverse=True):
            order.extend(i for i in bucket if proposals[i].confidence == conf)

    slots = [[f.name, frozenset([k]), f.description] for k, f in enumerate(fields)]
    for i in order:
        p = proposals[i]
        present = {s[0] for s in slots}
        if p.action == "merge":
            if not set(p.fields_to_merge) <= present:
                continue
            group = [s for s in slots if s[0] in p.fields_to_merge]
            best = group[0]
            for s in group[1:]:
                if (len(s[1]), len(s[2])) > (len(best[1]), len(best[2])) or (
                    (len(s[1]), len(s[2])) == (len(best[1]), len(best[2])) and s[0] < best[0]
                ):
                    best = s
            merged = [p.new_field_name or best[0], frozenset().union(*(s[1] for s in group)), best[2]]
            at = slots.index(group[0])
            slots = [s for s in slots if s[0] not in p.fields_to_merge]
            slots.insert(at, merged)
        elif p.action == "remove":
            if p.target_field in present:
                slots = [s for s in slots if s[0] != p.target_field]
        elif p.old_field_name in present:
            for s in slots:
                if s[0] == p.old_field_name:
                    s[0] = p.new_field_name
    return [(s[0], s[1], s[2]) for s in slots]


POOL = ["alpha", "bravo", "charlie", "delta", "echo", "fox", "golf"]


def random_instance(rng):
    names = rng.sample(POOL, rng.randint(1, 6))
    fields = [EmergentField(n, "d" * rng.randint(0, 3), "v", (f"src{k}",), "validation") for k, n in enumerate(names)]
    proposals = []
    for _ in range(rng.randint(0, 6)):
        kind = rng.choice(["merge", "remove", "rename"])
        conf = rng.choice([0.2, 0.5, 0.9])
        if kind == "merge":
            members = rng.sample(POOL, rng.randint(2, 3))
            proposals.append(Proposal("merge", fields_to_merge=members, confidence=conf,
                                      new_field_name=rng.choice([None, rng.choice(POOL + ["merged_x"])])))
        elif kind == "remove":
            proposals.append(Proposal("remove", target_field=rng.choice(POOL), confidence=conf))
        else:
            proposals.append(Proposal("rename", old_field_name=rng.choice(POOL), new_field_name=rng.choice(POOL + ["new_y"]),
                                      confidence=conf, origin="terminology"))
    critiques = [Critique(rng.choice(["challenge", "approve"]), rng.randrange(len(proposals)))
                 for _ in range(rng.randint(0, len(proposals)))] if proposals else []
    return proposals, critiques, fields


@criterion(3, "FieldManager agrees with a brute-force oracle on 1,000 random instances")
def test_field_manager_matches_oracle():
    rng = random.Random(1234)
    discrepancies = 0
    for _ in range(1000):
        proposals, critiques, fields = random_instance(rng)
        got = field_manager_apply(proposals, critiques, fields)
        got_view = [(f.name, frozenset(int(s[3:]) for s in f.sources), f.description) for f in got]
        if got_view != oracle_apply(proposals, critiques, fields):
            discrepancies += 1
    assert discrepancies == 0


# -- 4 ------------------------------------------------------------------------

@criterion(4, "tau sweep trades precision against recall with an interior F1 peak in under 10 s")
def test_tau_tradeoff():
    start = time.perf_counter()
    result = sweep_tau_benchmark([0.5, 0.6, 0.7, 0.8, 0.9], clusters=50, seed=42)
    elapsed = time.perf_counter() - start
    reports = [rep for _, rep in result.points]
    p = [r.precision for r in reports]
    r = [r.recall for r in reports]
    f = [r.f1 for r in reports]
    assert all(a <= b for a, b in zip(p, p[1:]))
    assert all(a >= b for a, b in zip(r, r[1:]))
    best = f.index(max(f))
    assert 0 < best < len(f) - 1 and f[best] > f[0] and f[best] > f[-1]
    assert elapsed < 10.0


# -- 5 ------------------------------------------------------------------------

WORDS = ["runway", "closure", "closed", "wind", "warning", "crane", "height", "taxiway", "light", "status", "reason", "maint"]


@criterion(5, "aggregation keeps every source excerpt in exactly one field")
def test_aggregation_conserves_sources():
    rng = random.Random(99)
    for trial in range(500):
        fields = []
        for k in range(rng.randint(1, 12)):
            name = "_".join(rng.sample(WORDS, rng.randint(1, 3)))
            desc = " ".join(rng.choices(WORDS, k=rng.randint(0, 4)))
            sources = tuple(f"t{trial}f{k}s{j}" for j in range(rng.randint(1, 3)))
            fields.append(EmergentField(name, desc, "", sources, "discovery"))
        out = consensus_aggregate(fields, AggregatorConfig(rng.choice([0.3, 0.5, 0.7, 0.9])))
        for f in fields:
            for s in f.sources:
                assert sum(s in g.sources for g in out) == 1


# -- 6 ------------------------------------------------------------------------

NAME_WORDS = ["runway", "closure", "wind", "crane", "height", "status", "reason", "lights"]


def optimal_tp(pred, gold, threshold=0.5):
    ok = [[name_similarity(a, b) >= threshold or a.lower() == b.lower() for b in gold] for a in pred]

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(pred):
            return 0
        out = best(i + 1, used)
        for j in range(len(gold)):
            if ok[i][j] and not used & (1 << j):
                out = max(out, 1 + best(i + 1, used | (1 << j)))
        return out

    return best(0, 0)


@criterion(6, "greedy discovery matching is within one of optimal; scorer arithmetic is exact")
def test_greedy_close_to_optimal():
    rng = random.Random(7)
    worst = 0
    for _ in range(1000):
        pred = ["_".join(rng.sample(NAME_WORDS, rng.randint(1, 3))) for _ in range(rng.randint(0, 6))]
        gold = ["_".join(rng.sample(NAME_WORDS, rng.randint(1, 3))) for _ in range(rng.randint(0, 6))]
        gap = optimal_tp(pred, gold) - len(greedy_match(pred, gold))
        assert gap >= 0
        worst = max(worst, gap)
    assert worst <= 1


def random_value(fdef, rng):
    if fdef.kind == "enum":
        pick = rng.choice(fdef.enum_values)
        return [pick] if fdef.multiple else pick
    if fdef.kind == "number":
        return rng.choice([None, rng.randint(0, 5000)])
    if fdef.kind == "timestamp":
        return f"2024-0{rng.randint(1, 9)}-1{rng.randint(0, 9)}T00:00:00Z"
    return rng.choice([None, f"V{rng.randint(0, 99)}"])


@criterion(6, "greedy discovery matching is within one of optimal; scorer arithmetic is exact")
def test_extraction_identity_on_generated_fixtures():
    rng = random.Random(11)
    schemas = list(builtin_schemas().values())
    for trial in range(200):
        results = []
        for d in range(rng.randint(1, 5)):
            schema = rng.choice(schemas)
            records = [{f.clear_name: random_value(f, rng) for f in schema.fields} for _ in range(rng.randint(0, 3))]
            results.append(ExtractionResult(f"t{trial}d{d}", schema.schema_id, records))
        rep = score_extraction(results, results)
        if rep.tp:
            assert rep.precision == rep.recall == rep.f1 == 1.0
        assert rep.fp == rep.fn == 0


@criterion(6, "greedy discovery matching is within one of optimal; scorer arithmetic is exact")
def test_f1_arithmetic():
    assert abs(f1_score(0.92, 0.93) - 0.92497297297297297) < 1e-12
    rng = random.Random(3)
    for _ in range(1000):
        p, r = rng.random(), rng.random()
        assert abs(f1_score(p, r) - 2 / (1 / p + 1 / r)) < 1e-12


# -- 7 ------------------------------------------------------------------------

MAPPING = {
    "REDL": ["EDGE", "REDL", "EDGE LGT"],
    "ALS": ["APCH", "APPROACH", "ALS", "PALS"],
    "RCL": ["CENTERLINE", "RCL", "CL"],
    "RTZL": ["TOUCHDOWN", "TDZ", "RTZL"],
}


@criterion(7, "ALS grade boundaries and lighting keyword coverage")
def test_als_boundaries():
    got = [grade_als(d) for d in (209, 210, 419, 420, 719, 720)]
    assert got == ["NALS", "BALS", "BALS", "IALS", "IALS", "FALS"]


@criterion(7, "ALS grade boundaries and lighting keyword coverage")
def test_keyword_coverage():
    for category, tokens in MAPPING.items():
        for token in tokens:
            assert map_lighting_keyword(token) == category
            assert map_lighting_keyword(token.lower()) == category
    assert map_lighting_keyword("TWY") is None


# -- 8 ------------------------------------------------------------------------

@criterion(8, "temperature-0 self-consistency equals a single sample")
def test_self_consistency_degenerates_at_zero():
    checked = 0
    for schema in builtin_schemas().values():
        for n, ex in enumerate(builtin_bank(schema)):
            notam = parse_notam(f"{schema.schema_id}-{n}", ex.notam_text)
            answer = json.dumps(ex.records())
            mock = MockBackend(default=answer)
            cfg = StrategyConfig("self_consistency", sc_temperatures=(0.0,), sc_samples_per_temperature=5)
            voted = run_extraction([notam], schema, cfg, mock)[0]
            single = parse_output(answer, schema, notam.id)
            assert len(mock.calls) == 5 and voted.records == single.records
            samples = [parse_output(answer, schema, notam.id) for _ in range(3)]
            for s in samples:
                s.temperature = 0.0
            assert self_consistency_vote(samples).records == samples[1].records
            checked += 1
    assert checked >= 10


# -- 9 ------------------------------------------------------------------------

TAXI = get_schema("runway_taxiway")
FULL = {
    "airport": "EGLL",
    "runway": "09L/27R",
    "taxiway": "A1",
    "surface_status": "CLOSED",
    "closure_reason": "MAINTENANCE",
    "start_time": "2024-03-01T00:00:00Z",
    "end_time": "2024-03-05T23:59:00Z",
}


@criterion(9, "SRCV touches only the targeted field and leaves untriggered output alone")
def test_srcv_perm_locality():
    notam = parse_notam("p", "Q) EGTT/QMRLC/IV/NBO/A/000/999/\nA) EGLL B) 2403010000 C) PERM\nE) RWY 09L/27R CLSD")
    assert notam.valid_to is PERMANENT
    before = ExtractionResult("p", "runway_taxiway", [dict(FULL), dict(FULL, runway="18")])
    mock = MockBackend().add_rule('{"verdict": "correct", "value": null}', contains="Rule ID: perm_end_time")
    after = apply_srcv(before, notam, builtin_srcv_rules(TAXI), mock, TAXI)
    for old, new in zip(before.records, after.records):
        assert new["end_time"] is None
        rest = lambda r: json.dumps({k: v for k, v in r.items() if k != "end_time"}, sort_keys=True).encode()
        assert rest(old) == rest(new)


@criterion(9, "SRCV touches only the targeted field and leaves untriggered output alone")
def test_srcv_no_trigger_identity():
    texts = [
        "A) EGLL B) 2403010000 C) 2403052359\nE) RWY 09L/27R CLSD",
        "A) LFPG B) 2403010000 C) 2404010000\nE) TWY A1 CLSD DUE WIP",
    ]
    for i, text in enumerate(texts):
        notam = parse_notam(f"d{i}", text)
        before = ExtractionResult(notam.id, "runway_taxiway", [dict(FULL)])
        mock = MockBackend()
        after = apply_srcv(before, notam, builtin_srcv_rules(TAXI), mock, TAXI)
        assert after == before and mock.calls == []


# -- 10 -----------------------------------------------------------------------

LIGHT = get_schema("runway_lighting")
SHOT_NOTAMS = [
    ("s1", "Q) ZBPE/QLAAS/IV/NBO/A/000/999/\nA) ZBAA B) 2403010000 C) 2403052359\nE) RWY 18L APCH LGT U/S"),
    ("s2", "Q) EGTT/QLCAS/IV/NBO/A/000/999/\nA) EGLL B) 2403010000 C) 2403032359\nE) RWY 27L CL LGT U/S"),
    ("s3", "Q) LFFF/QLEAS/IV/NBO/A/000/999/\nA) LFPG B) 2403010000 C) 2403032359\nE) RWY 09R EDGE LGT U/S"),
]
SHOT_ANSWERS = {
    "18L": {"airport": "ZBAA", "runway": "18L", "lightcategory": "ALS", "status": "unavailable", "als": "NALS"},
    "27L": {"airport": "EGLL", "runway": "27L", "lightcategory": "RCL", "status": "unavailable"},
    "09R": {"airport": "LFPG", "runway": "09R", "lightcategory": "REDL", "status": "unavailable"},
}


def _shot_responder(req):
    tail = req.user_text.rsplit("### Example", 1)[-1]
    for runway, answer in SHOT_ANSWERS.items():
        if f"RWY {runway}" in tail.splitlines()[-1]:
            return json.dumps(answer)
    return None


@criterion(10, "shot sweep replays four reports from one cassette without live calls")
def test_shot_sweep_replay(tmp_path):
    notams = [parse_notam(i, t) for i, t in SHOT_NOTAMS]
    gold = [parse_output(json.dumps(SHOT_ANSWERS[r]), LIGHT, n.id) for r, n in zip(SHOT_ANSWERS, notams)]
    cassette = tmp_path / "shots.jsonl"
    mock = MockBackend(default=_shot_responder)
    recorder = RecordingBackend(mock, cassette)
    base = StrategyConfig("icl")
    recorded = sweep_extraction("shots", [1, 3, 5, 7], notams, gold, LIGHT, base, recorder, builtin_bank(LIGHT))
    recorder.close()
    assert len(mock.calls) == 12

    replayed = sweep_extraction("shots", [1, 3, 5, 7], notams, gold, LIGHT, base, ReplayBackend(cassette), builtin_bank(LIGHT))
    assert [v for v, _ in replayed.points] == [1, 3, 5, 7]
    assert [r.to_json() for _, r in replayed.points] == [r.to_json() for _, r in recorded.points]
    assert all(r.f1 == 1.0 for _, r in replayed.points)


# -- 11 -----------------------------------------------------------------------

ENDS = ["2403020000", "2403030000", "2403011200", "2403021200", "2403040000",
        "2403010600", "2403060000", "2403020000", "PERM", "PERM"]


def stats_corpus():
    rows = []
    for k, end in enumerate(ENDS):
        airport = "EGLL" if k % 2 else "LFPG"
        body = " ".join(["WORD"] * (k + 1))
        text = f"Q) EGTT/QMRLC/IV/NBO/A/000/999/\nA) {airport} B) 2403010000 C) {end}\nE) {body}"
        rows.append(parse_notam(f"r{k}", text))
    return rows


@criterion(11, "corpus statistics match hand-computed values and JSONL round-trips")
def test_corpus_stats_hand_computed():
    stats = compute_stats(stats_corpus())
    # validity in days: 1, 2, 0.5, 1.5, 3, 0.25, 5, 1 (two PERM rows excluded)
    assert stats.validity_count == 8
    assert abs(stats.validity_mean_days - 1.78125) < 1e-9
    assert abs(stats.validity_median_days - 1.25) < 1e-9
    assert (stats.validity_min_days, stats.validity_max_days) == (0.25, 5.0)
    # nine header tokens plus 1..10 body words
    assert abs(stats.mean_words - 14.5) < 1e-9
    assert (stats.min_words, stats.max_words) == (10, 19)
    assert abs(stats.mean_lines - 3.0) < 1e-9
    assert stats.airports == 2 and stats.firs == 1 and stats.record_count == 10


@criterion(11, "corpus statistics match hand-computed values and JSONL round-trips")
def test_corpus_jsonl_round_trip(tmp_path):
    records = stats_corpus()
    path = tmp_path / "corpus.jsonl"
    write_corpus(records, path)
    loaded = load_corpus(path)
    assert loaded.rejects == [] and loaded.records == records
    write_corpus(loaded.records, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()
