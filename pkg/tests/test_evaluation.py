from __future__ import annotations

import json
import math
import string
import unicodedata
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cassette_provider, label, verdict
from memcycle.config import build_config
from memcycle.errors import SchemaViolation
from memcycle.evaluation import (
    QuestionRecord,
    RunReport,
    aggregate,
    bleu1,
    emit_report,
    ingest_dataset,
    judge_answer,
    parse_dataset,
    render_markdown,
    render_svg,
    run_experiment,
    token_f1,
)


def oracle_tokens(text, articles):
    kept = "".join(c for c in text.lower()
                   if c not in string.punctuation and not unicodedata.category(c).startswith("P"))
    return [t for t in kept.split() if not (articles and t in ("a", "an", "the"))]


def oracle_f1(pred, gold):
    p, g = oracle_tokens(pred, True), oracle_tokens(gold, True)
    overlap = 0
    remaining = list(g)
    for tok in p:
        if tok in remaining:
            remaining.remove(tok)
            overlap += 1
    if not p or not g or not overlap:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def oracle_bleu1(pred, gold):
    p, g = oracle_tokens(pred, False), oracle_tokens(gold, False)
    if not p:
        return 0.0
    clipped = sum(min(p.count(t), g.count(t)) for t in set(p))
    bp = 1.0 if len(p) >= len(g) else math.exp(1 - len(g) / len(p))
    return bp * (clipped / len(p))


def test_metric_fixtures():
    assert token_f1("paris france", "paris") == pytest.approx(0.6667, abs=1e-4)
    assert bleu1("a a a", "a b") == pytest.approx(1 / 3, abs=1e-9)
    assert token_f1("The Eiffel Tower!", "the eiffel tower") == 1.0
    assert token_f1("cat", "dog") == 0.0
    assert bleu1("", "anything") == 0.0 and token_f1("", "x") == 0.0
    assert bleu1("same words here", "same words here") == 1.0
    assert token_f1("“Paris”, France", "paris france") == 1.0  # unicode punctuation is stripped too


words = st.lists(st.sampled_from(["a", "an", "the", "cat", "dog", "Paris", "7", "may", "2023", "x!"]), max_size=8)


@settings(max_examples=300, deadline=None)
@given(words, words)
def test_metrics_match_counting_oracle(p, g):
    pred, gold = " ".join(p), " ".join(g)
    assert token_f1(pred, gold) == oracle_f1(pred, gold)
    assert bleu1(pred, gold) == oracle_bleu1(pred, gold)
    assert 0.0 <= token_f1(pred, gold) <= 1.0 and 0.0 <= bleu1(pred, gold) <= 1.0


@given(st.text())
def test_f1_identity(text):
    expected = 1.0 if oracle_tokens(text, True) else 0.0
    assert token_f1(text, text) == expected


def test_judge_answer_polarity():
    provider = cassette_provider({"judge": [label("CORRECT"), label("WRONG"), "hmm, maybe"]})
    assert [judge_answer("q", "g", "p", provider) for _ in range(3)] == ["CORRECT", "WRONG", "WRONG"]


def minimal(**overrides):
    doc = {"conversation_id": "c", "sessions": [{"session_id": "s1", "timestamp": "t", "turns": [
        {"turn_id": "t1", "speaker": "A", "text": "hi"}]}],
           "qa": [{"question": "q?", "answer": 2023, "category": "temporal"}]}
    doc.update(overrides)
    return doc


def test_ingest(tmp_path, caplog):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(minimal()))
    data = ingest_dataset(path)
    assert data.counts() == (1, 1, 1) and data.qa[0].gold_answer == "2023"
    with caplog.at_level("INFO"):
        data = parse_dataset(minimal(qa=[{"question": "q", "answer": "a", "category": "adversarial"},
                                         {"question": "q", "answer": "a", "category": "single_hop"}]))
    assert data.dropped_adversarial == 1 and len(data.qa) == 1
    assert "dropped 1 adversarial" in caplog.text


@pytest.mark.parametrize("doc, location", [
    ({"conversation_id": "c", "qa": []}, "$"),
    (minimal(qa=[{"question": "q", "answer": "a", "category": "riddle"}]), "qa[0].category"),
    (minimal(sessions=[{"session_id": "s", "timestamp": "t", "turns": [{"turn_id": "x", "speaker": "A"}]}]),
     "sessions[0].turns[0]"),
    (minimal(sessions=[{"session_id": "s", "timestamp": 5, "turns": []}]), "sessions[0].timestamp"),
])
def test_ingest_schema_paths(doc, location):
    with pytest.raises(SchemaViolation) as info:
        parse_dataset(doc)
    assert info.value.location == location


def record(i, category, f1, correct):
    return QuestionRecord(i, "q", category, "g", "p", f1, f1 / 2, "CORRECT" if correct else "WRONG")


def test_aggregation_hand_count_and_empty_category():
    records = [record(1, "single_hop", 1.0, True), record(2, "single_hop", 0.5, True),
               record(3, "temporal", 0.0, False)]
    agg = aggregate(records)
    assert agg["overall"]["ACC"] == pytest.approx(66.67, abs=5e-3)
    assert agg["overall"]["F1"] == pytest.approx(50.0, abs=1e-9)
    assert agg["multi_hop"] == {"count": 0, "F1": None, "B1": None, "ACC": None}
    assert sum(agg[c]["count"] for c in ("multi_hop", "temporal", "open_domain", "single_hop")) == 3


def test_failed_questions_are_excluded_and_flag_partial():
    bad = record(2, "temporal", 0.0, False)
    bad.status = "failed"
    report = RunReport("c", {}, [record(1, "temporal", 1.0, True), bad], {}, {})
    assert report.partial and report.aggregates["temporal"]["count"] == 1


def test_emit_report_and_markdown_agree(tmp_path):
    report = RunReport("c", {"ablations": ["R"]}, [record(1, "single_hop", 1.0, True),
                                                  record(2, "temporal", 0.25, False)], {}, {})
    out = tmp_path / "nested" / "r.json"
    emit_report(report, out, tmp_path / "traces")
    doc = json.loads(out.read_text())
    md = out.with_suffix(".md").read_text()
    assert md == render_markdown(doc, "memcycle/R")
    assert "| memcycle/R |" in md and "—" in md
    row = md.splitlines()[2].split("|")[2:-1]
    cols = [(c, m) for c in ("multi_hop", "temporal", "open_domain", "single_hop", "overall")
            for m in ("F1", "B1", "ACC")]
    for cell, (c, m) in zip(row, cols):
        value = doc["aggregates"][c][m]
        assert cell.strip() == ("—" if value is None else f"{value:.2f}")


def test_render_svg(tmp_path):
    pytest.importorskip("matplotlib")
    report = RunReport("c", {}, [record(1, "single_hop", 1.0, True)], {}, {})
    out = tmp_path / "r.svg"
    render_svg(report.to_dict(), out)
    assert out.read_text().lstrip().startswith("<?xml")


TWO_TURNS = {"conversation_id": "c", "sessions": [{"session_id": "s1", "timestamp": "May 2023", "turns": [
    {"turn_id": "t1", "speaker": "Ana", "text": "I adopted a dog named Rex."},
    {"turn_id": "t2", "speaker": "Ben", "text": "I live in Porto."}]}],
    "qa": [{"question": "What is Ana's dog called?", "answer": "Rex", "category": "single_hop"},
           {"question": "Where does Ben live?", "answer": "Porto", "category": "single_hop"}]}


def full_script(ablations=""):
    """Responses for a two-turn, two-question run, trimmed to what each ablation consumes."""
    script = {
        "meta_construction": ["FACTS:\n- [Ana] adopted Rex", "FACTS:\n- [Ben] lives in Porto"],
        "memory_manager": ['[{"op": "ADD", "text": "Ana adopted a dog named Rex."}]',
                           '[{"op": "ADD", "text": "Ben lives in Porto."}]'],
        "probe_generator": [json.dumps([{"question": "Dog?", "answer": "Rex", "type": "single_hop"}])],
        "answerer": ["Rex", "Rex", "Porto"],
        "judge": [label("CORRECT")] * 3,
        "meta_answerability": [verdict("NOT ANSWERABLE", "- name"), verdict("ANSWERABLE"), verdict("ANSWERABLE")],
        "query_rewriter": [json.dumps({"rewritten_query": "Rex dog name"})],
    }
    if "C" in ablations:
        del script["meta_construction"]
    if "E" in ablations:
        del script["probe_generator"]
        script["answerer"], script["judge"] = script["answerer"][1:], script["judge"][1:]
    if "R" in ablations:
        del script["meta_answerability"], script["query_rewriter"]
    return script


@pytest.mark.parametrize("ablations", ["", "C", "R", "E", "C,R,E"])
def test_run_experiment_call_accounting(ablations):
    config = build_config({"dimension": 16, "J": 1, "ablations": ablations})
    script = full_script(ablations)
    provider = cassette_provider(script)
    report = run_experiment(parse_dataset(TWO_TURNS), config, provider)
    assert provider.remaining() == {}
    assert report.calls == {role: len(q) for role, q in sorted(script.items())}
    assert not report.partial
    assert report.aggregates["overall"]["ACC"] == 100.0


def test_run_is_deterministic():
    config = build_config({"dimension": 16, "J": 1})
    runs = [run_experiment(parse_dataset(TWO_TURNS), config, cassette_provider(full_script())) for _ in range(2)]
    assert runs[0].to_json() == runs[1].to_json()
    assert runs[0].config["k"] == 30 and runs[0].config["H"] == 3
    assert set(runs[0].traces) == {"sessions/s1.json", "questions/q0001.json", "questions/q0002.json"}


def test_exhausted_cassette_marks_question_failed():
    config = build_config({"dimension": 16, "J": 1})
    script = full_script()
    script["judge"] = script["judge"][:2]
    report = run_experiment(parse_dataset(TWO_TURNS), config, cassette_provider(script))
    assert report.partial
    assert [r.status for r in report.records] == ["ok", "failed"]
    assert "CassetteExhausted" in report.records[1].error
    assert Counter(r.judge_label for r in report.records)["WRONG"] == 1
