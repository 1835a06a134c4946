import json
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings, strategies as st

from notamkit.corpus import (
    PERMANENT,
    UNKNOWN,
    compute_stats,
    decode_qcode,
    load_corpus,
    parse_icao_time,
    parse_notam,
    split_items,
    text_counts,
    write_corpus,
)
from notamkit.errors import CorpusEmpty, EmptyInput, IoError, MalformedQCode


def utc(*args):
    return datetime(*args, tzinfo=timezone.utc)


def test_parse_full_notice():
    rec = parse_notam("n1", "Q) ZBPE/QMRLC/IV/NBO/A/000/999/\nA) ZBAA B) 2401010800 C) PERM\nE) RWY 18L CLSD")
    assert rec.q_line.subject_letter == "M"
    assert rec.location == "ZBAA"
    assert rec.fir == "ZBPE"
    assert rec.valid_from == utc(2024, 1, 1, 8, 0)
    assert rec.valid_to is PERMANENT
    assert rec.body_text == "RWY 18L CLSD"
    assert rec.category == "Movement Areas"


def test_parse_body_only():
    rec = parse_notam("n2", "E) SNOW ON TWY A")
    assert rec.q_line is None
    assert rec.body_text == "SNOW ON TWY A"
    assert rec.category == UNKNOWN


@pytest.mark.parametrize("text", ["", "   \n"])
def test_parse_empty(text):
    with pytest.raises(EmptyInput):
        parse_notam("n3", text)


def test_estimated_end_and_schedule():
    rec = parse_notam("n4", "A) EGLL B) 2403010000 C) 2403052359 EST D) DAILY 0800-1600 E) CRANE ERECTED")
    assert rec.is_estimated_end
    assert rec.valid_to == utc(2024, 3, 5, 23, 59)
    assert rec.schedule_text == "DAILY 0800-1600"
    assert rec.body_text == "CRANE ERECTED"


def test_inverted_validity_drops_end():
    rec = parse_notam("n5", "A) EGLL B) 2403050000 C) 2403010000 E) X")
    assert rec.valid_to is None and not rec.is_estimated_end


def test_item_markers_need_leading_space():
    assert split_items("E) TWYA)B CLSD") == {"E": "TWYA)B CLSD"}


def test_2400_is_end_of_day():
    assert parse_icao_time("2403012400") == utc(2024, 3, 1, 23, 59)


@pytest.mark.parametrize(
    "raw,letter,category",
    [("QRTCA", "R", "Airspace Restrictions"), ("QLRAS", "L", "Lighting Facilities"), ("QXXXX", "X", UNKNOWN)],
)
def test_decode_qcode(raw, letter, category):
    q = decode_qcode(raw)
    assert (q.subject_letter, q.category_name) == (letter, category)


@pytest.mark.parametrize("raw", ["", "Q", "XRTCA", None])
def test_decode_qcode_malformed(raw):
    with pytest.raises(MalformedQCode):
        decode_qcode(raw)


def test_qcode_domains():
    assert decode_qcode("QLAAS").domain == "LandingAid"
    assert decode_qcode("QMRLC").domain == "RunwayTaxiway"
    assert decode_qcode("QXXXX").domain is None


def test_text_counts():
    assert text_counts("A B\nC") == (2, 3, 5)
    rec = parse_notam("x", "E) ONE TWO THREE")
    assert (rec.line_count, rec.word_count, rec.char_count) == (1, 4, 16)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_load_corpus_valid(tmp_path):
    p = _write(tmp_path / "c.jsonl", [json.dumps({"id": f"n{i}", "text": f"E) TEXT {i}"}) for i in range(3)])
    corpus = load_corpus(p)
    assert len(corpus.records) == 3 and corpus.rejects == []


def test_load_corpus_rejects(tmp_path):
    p = _write(
        tmp_path / "c.jsonl",
        [json.dumps({"id": "a", "text": "E) X"}), "{not json", json.dumps({"id": "b", "text": "E) Y"})],
    )
    corpus = load_corpus(p)
    assert [r.id for r in corpus.records] == ["a", "b"]
    assert len(corpus.rejects) == 1 and corpus.rejects[0].line_no == 2


def test_load_corpus_duplicate_id(tmp_path):
    p = _write(tmp_path / "c.jsonl", [json.dumps({"id": "a", "text": "E) X"})] * 2)
    corpus = load_corpus(p)
    assert len(corpus.records) == 1 and "duplicate" in corpus.rejects[0].reason


def test_load_corpus_errors(tmp_path):
    with pytest.raises(IoError):
        load_corpus(tmp_path / "missing.jsonl")
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(CorpusEmpty):
        load_corpus(tmp_path / "empty.jsonl")


def test_overrides_win(tmp_path):
    line = {"id": "a", "text": "A) EGLL E) X", "airport": "lfpg", "valid_to": "PERM", "qcode": "QWULW"}
    rec = load_corpus(_write(tmp_path / "c.jsonl", [json.dumps(line)])).records[0]
    assert rec.location == "LFPG" and rec.valid_to is PERMANENT and rec.q_line.subject_letter == "W"


def test_stats_two_records():
    recs = [
        parse_notam("a", "A) EGLL B) 2403010000 C) 2403030000 E) X"),
        parse_notam("b", "A) EGLL B) 2403010000 C) 2403050000 E) X"),
    ]
    s = compute_stats(recs)
    assert s.validity_mean_days == 3.0 and s.validity_median_days == 3.0
    assert s.airports == 1


def test_stats_word_count():
    s = compute_stats([parse_notam("a", "one two three four five six seven eight nine ten")])
    assert s.mean_words == 10.0


def test_stats_all_permanent():
    s = compute_stats([parse_notam("a", "B) 2403010000 C) PERM E) X")])
    assert s.validity_count == 0 and s.validity_mean_days is None
    assert "n/a" in s.render()


def test_stats_empty():
    with pytest.raises(CorpusEmpty):
        compute_stats([])


_text = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 /\n.", min_size=1, max_size=60).filter(str.strip)


@settings(max_examples=60, deadline=None)
@given(_text, st.booleans())
def test_round_trip_property(tmp_path_factory, body, perm):
    end = "PERM" if perm else "2403052359"
    text = f"Q) EGTT/QMRLC/IV/NBO/A/000/999/\nA) EGLL B) 2403010000 C) {end}\nE) {body}"
    rec = parse_notam("p1", text)
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    write_corpus([rec], path)
    assert load_corpus(path).records == [rec]
