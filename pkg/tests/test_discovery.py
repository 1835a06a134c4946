import json

import pytest
import scripted

from notamkit.corpus import parse_notam
from notamkit.discovery import (
    AggregatorConfig,
    CandidateSet,
    EmergentField,
    canonical_token,
    consensus_aggregate,
    domain_relevance,
    field_tokens,
    jaccard,
    jaccard_sets,
    run_mda,
)
from notamkit.errors import MalformedAgentOutput, StageError
from notamkit.gateway import MockBackend

NOTAM = parse_notam("n1", "E) RWY 09L CLSD DUE TO MAINT. STRONG CROSSWIND WARNING.")


def ef(name, desc="", sources=("RWY",), origin="validation"):
    return EmergentField(name, desc, "", tuple(sources), origin)


def test_canonical_token():
    assert canonical_token("closed") == "clos"
    assert canonical_token("warnings") == "warning"
    assert canonical_token("pass") == "pass"
    assert canonical_token("red") == "red"


def test_jaccard_examples():
    assert jaccard_sets({"runway", "closure", "maint"}, {"runway", "closed", "maint"}) == 0.5
    a = ef("runway_closure", "closed runway")
    assert jaccard(a, a) == 1.0
    assert jaccard(ef("alpha"), ef("bravo")) == 0.0


def test_stopwords_removed():
    assert field_tokens(ef("end_of_the_period")) == {"end", "period"}


def test_field_validation():
    with pytest.raises(ValueError):
        EmergentField("x", "", "", ())
    with pytest.raises(ValueError):
        EmergentField("___", "", "", ("a",))


def test_aggregate_above_threshold():
    # 4 shared of 5 tokens -> 0.8
    a = ef("alpha bravo charlie delta", sources=["s1"])
    b = ef("alpha bravo charlie delta echo", sources=["s2"])
    out = consensus_aggregate([a, b], AggregatorConfig(0.7))
    assert len(out) == 1 and set(out[0].sources) == {"s1", "s2"} and out[0].origin_agent == "merged"


def test_aggregate_below_threshold():
    a, b = ef("alpha bravo", sources=["s1"]), ef("alpha charlie", sources=["s2"])
    assert consensus_aggregate([a, b], AggregatorConfig(0.7)) == [a, b]


def test_aggregate_transitive_chain():
    a = ef("t1 t2 t3 t4 t5 t6 t7 t8", sources=["a"])
    b = ef("t1 t2 t3 t4 t5 t6 t7 t8 t9 t10", sources=["b"])
    c = ef("t3 t4 t5 t6 t7 t8 t9 t10", sources=["c"])
    assert jaccard(a, b) > 0.7 and jaccard(b, c) > 0.7 and jaccard(a, c) < 0.7
    out = consensus_aggregate([a, b, c])
    assert len(out) == 1 and set(out[0].sources) == {"a", "b", "c"}


def test_representative_most_sources():
    a = ef("x y z w", "desc", sources=["1"])
    b = ef("x y z w v", "desc", sources=["2", "3"])
    out = consensus_aggregate([a, b], AggregatorConfig(0.5))
    assert out[0].name == "x y z w v"
    # equal sources and descriptions: lexicographically first name
    c = ef("x y z w u", "desc", sources=["4"])
    assert consensus_aggregate([c, a], AggregatorConfig(0.5))[0].name == "x y z w"


def test_tau_bounds():
    with pytest.raises(ValueError):
        AggregatorConfig(0.0)


def _agents(z1, z2, z3):
    mock = MockBackend()
    mock.add_rule(json.dumps(z1), contains="Discovery Agent in a")
    mock.add_rule(json.dumps(z2), contains="Analysis Agent in a")
    mock.add_rule(json.dumps(z3), contains="Validation Agent in a")
    return mock


def test_mda_merges_close_names():
    closure = {"name": "runway_closure", "description": "runway closed to traffic due to maintenance", "value": "09L", "sources": ["RWY 09L CLSD"]}
    closed = dict(closure, name="runway_closed", sources=["09L CLSD"])
    wind = {"name": "wind_warning", "description": "wind hazard", "value": "x", "sources": ["CROSSWIND WARNING"]}
    z = run_mda(NOTAM, _agents([closure], [closure], [closure, closed, wind]))
    assert [f.name for f in z.fields] == ["runway_closed", "wind_warning"]
    assert z.fields[0].sources == ("RWY 09L CLSD", "09L CLSD")
    assert z.stage == "Z_MDA"


def test_mda_empty():
    z = run_mda(NOTAM, _agents([], [], []))
    assert z.fields == ()


def test_mda_drops_ungrounded():
    good = {"name": "reason", "description": "cause", "value": "MAINT", "sources": ["due to maint"]}
    bad = {"name": "bogus", "description": "x", "value": "x", "sources": ["NOT IN TEXT"]}
    stages = {}
    z = run_mda(NOTAM, _agents([good, bad], [good], [good, bad]), stages=stages)
    assert [f.name for f in z.fields] == ["reason"]
    assert [f.name for f in stages["Z1"].fields] == ["reason"]
    assert any("bogus" in n for n in z.notes)


def test_mda_retries_malformed_once():
    mock = _agents([], [], [])
    calls = []

    def flaky(req):
        calls.append(req)
        return "not json" if len(calls) == 1 else "[]"

    mock.rules.insert(0, type(mock.rules[0])(flaky, ("Discovery Agent in a",)))
    run_mda(NOTAM, mock)
    assert len(calls) == 2 and calls[1].user_text.endswith("JSON array and nothing else.")


def test_mda_malformed_twice():
    mock = MockBackend(default="no json here")
    with pytest.raises(MalformedAgentOutput):
        run_mda(NOTAM, mock)


def test_mda_gateway_error():
    with pytest.raises(StageError) as info:
        run_mda(NOTAM, MockBackend())
    assert info.value.stage == "Z1"


def test_scripted_fixture_mda():
    z = run_mda(scripted.notam(), scripted.backend())
    assert [f.name for f in z.fields] == ["runway_closure", "closure_reason", "wind_warning"]


def test_candidate_set_round_trip():
    z = run_mda(scripted.notam(), scripted.backend())
    assert CandidateSet.from_json(json.loads(json.dumps(z.to_json()))) == z


def test_relevance_in_unit_interval():
    f = ef("runway_closure", "runway closed", sources=["RWY 09L CLSD"])
    assert 0.0 < domain_relevance(f) <= 1.0
