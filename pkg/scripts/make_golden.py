"""Regenerate the committed golden artifacts in ``golden/``.

The toy conversation has two sessions of three turns and four questions, one
per category. The cassette scripts every model response in call order and
uses hashed embeddings, so the run needs no network. The script asserts the
run took the intended paths (one SKIP on a duplicate repair fact, one INSERT,
a refinement step, a parse fallback) and that every response was consumed.

    python scripts/make_golden.py            # rewrite golden/
    python scripts/make_golden.py --check    # fail if golden/ is stale
"""
from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from memcycle.config import build_config
from memcycle.evaluation import emit_report, parse_dataset, render_markdown, run_experiment, variant_label
from memcycle.providers import Cassette, CassetteProvider

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "golden"
DIMENSION = 64
J = 2

S1, S2 = "8 May, 2023", "2 June, 2023"

DATASET = {
    "conversation_id": "toy-01",
    "sessions": [
        {"session_id": "s1", "timestamp": S1, "turns": [
            {"turn_id": "t1", "speaker": "Ana", "text": "I went to a pottery class yesterday and made a blue bowl."},
            {"turn_id": "t2", "speaker": "Ben", "text": "Nice! I just adopted a beagle named Pepper."},
            {"turn_id": "t3", "speaker": "Ana", "text": "I'm moving to Lisbon next month for a new job."},
        ]},
        {"session_id": "s2", "timestamp": S2, "turns": [
            {"turn_id": "t4", "speaker": "Ben", "text": "Pepper learned to fetch this week."},
            {"turn_id": "t5", "speaker": "Ana", "text": "I arrived in Lisbon last Friday and started at the city museum."},
            {"turn_id": "t6", "speaker": "Ben", "text": "I'm planning a trip to visit you in July."},
        ]},
    ],
    "qa": [
        {"question": "What is the name of Ben's dog?", "answer": "Pepper", "category": "single_hop"},
        {"question": "When did Ana go to the pottery class?", "answer": "7 May 2023", "category": "temporal"},
        {"question": "Which city is Ben planning to visit in July?", "answer": "Lisbon", "category": "multi_hop"},
        {"question": "Would Ana enjoy a career in the arts?", "answer": "Yes, she works at a museum and does pottery",
         "category": "open_domain"},
        {"question": "What is Ana's passport number?", "answer": "unknown", "category": "adversarial"},
    ],
}


def facts(*lines: str) -> str:
    return "FACTS:\n" + "\n".join(f"- {line}" for line in lines)


def edits(*ops: dict) -> str:
    return json.dumps(list(ops))


def verdict(decision: str, reason: str, gaps: str = "NONE", speaker: str = "unknown",
            time_need: str = "NONE", guidance: str = "") -> str:
    return (f"<decision>{decision}</decision>\n<reason>{reason}</reason>\n<key-gaps>{gaps}</key-gaps>\n"
            f"<missing-speaker>{speaker}</missing-speaker>\n<time-need>{time_need}</time-need>\n"
            f"<retrieval-guidance>{guidance}</retrieval-guidance>")


def label(value: str, why: str) -> str:
    return f"{why}\n{json.dumps({'label': value})}"


COMPLETIONS = {
    # one planner response per turn, in dialogue order
    "meta_construction": [
        facts(f"[Ana] Ana went to a pottery class the day before {S1}", "[Ana] Ana made a blue bowl at the pottery class"),
        facts("[Ben] Ben adopted a beagle named Pepper"),
        facts("[Ana] Ana is moving to Lisbon next month for a new job"),
        facts("[Ben] Ben's dog Pepper learned to fetch"),
        facts(f"[Ana] Ana arrived in Lisbon the Friday before {S2}", "[Ana] Ana started a job at the city museum",
              "[Ana] conflicts with: Ana is moving to Lisbon next month"),
        facts("[Ben] Ben is planning a trip to visit Ana in July"),
    ],
    "memory_manager": [
        edits({"op": "ADD", "text": f"Ana went to a pottery class the day before {S1}."},
              {"op": "ADD", "text": "Ana made a blue bowl at the pottery class."}),
        edits({"op": "ADD", "text": "Ben adopted a beagle named Pepper."}),
        edits({"op": "ADD", "text": "Ana is moving to Lisbon next month for a new job."}),
        edits({"op": "ADD", "text": "Ben's dog Pepper learned to fetch."}),
        edits({"op": "UPDATE", "target_id": "m000004",
               "text": f"Ana moved to Lisbon and started a job at the city museum ({S2})."}),
        edits({"op": "ADD", "text": "Ben is planning a trip to Lisbon to visit Ana in July."}),
    ],
    # one probe set per session
    "probe_generator": [
        json.dumps([
            {"question": "What did Ana make at the pottery class?", "answer": "A blue bowl", "type": "single_hop"},
            {"question": "What breed is Ben's dog?", "answer": "A beagle", "type": "multi_session"},
        ]),
        json.dumps([
            {"question": "When did Ana arrive in Lisbon?", "answer": f"The Friday before {S2}", "type": "temporal"},
            {"question": "What trick did Pepper learn?", "answer": "Fetch", "type": "single_hop"},
        ]),
    ],
    # two probe answers, then four benchmark answers
    "answerer": [
        "A blue bowl.",
        "Not mentioned in the conversation.",
        "She moved in June 2023.",
        "Fetch.",
        "Pepper.",
        f"The day before {S1}.",
        "Lisbon.",
        "Probably not.",
    ],
    "judge": [
        label("CORRECT", "Same object."),
        label("WRONG", "The answer misses the breed."),
        label("WRONG", "No specific day is given."),
        label("CORRECT", "Same trick."),
        label("CORRECT", "The dog's name matches."),
        label("CORRECT", "The day before 8 May 2023 is 7 May 2023."),
        label("CORRECT", "Same city."),
        label("WRONG", "The gold answer says yes."),
    ],
    "repairer": [
        # repeats an existing entry verbatim, so consolidation sees a duplicate
        json.dumps({"op": "ADD_FACT", "target_speaker": "speaker_b", "fact": "Ben adopted a beagle named Pepper.",
                    "evidence_span": "I just adopted a beagle named Pepper.", "confidence": 0.9,
                    "reason": "breed missing from the answer"}),
        json.dumps({"op": "ADD_FACT", "target_speaker": "speaker_a",
                    "fact": f"Ana arrived in Lisbon last Friday, the Friday before {S2}.",
                    "evidence_span": "I arrived in Lisbon last Friday", "confidence": 0.85,
                    "reason": "arrival date was folded into an update"}),
    ],
    "consolidator": [
        json.dumps({"action": "SKIP", "merge_target_index": -1, "merged_fact": "",
                    "reason": "entry [0] already states this"}),
    ],
    "meta_answerability": [
        verdict("ANSWERABLE", "Ben's dog is named Pepper."),
        verdict("NOT ANSWERABLE", "The class date is only implied.", gaps="- date of the pottery class",
                speaker="speaker-1", time_need=f"calendar day, anchored on {S1}",
                guidance="search pottery class with the session date"),
        verdict("ANSWERABLE", "The entry gives the day before 8 May 2023."),
        verdict("ANSWERABLE", "Ben plans to visit Ana, who lives in Lisbon."),
        "I think the memories hint at this but I am unsure.",
    ],
    "query_rewriter": [
        json.dumps({"rewritten_query": f"Ana pottery class day before {S1}", "strategy": "time anchor",
                    "target_speaker": "speaker-1"}),
    ],
}

CONFIG_TOML = f"""\
[run]
J = {J}
dimension = {DIMENSION}

[provider]
mode = "cassette"
cassette = "golden/toy_cassette.json"
"""


def expected_paths(report, traces) -> None:
    decisions = [d["action"] for key in ("sessions/s1.json", "sessions/s2.json")
                 for d in traces[key]["evolution"]["decisions"]]
    assert decisions == ["SKIP", "INSERT"], decisions
    assert traces["questions/q0002.json"]["steps"] == 1
    assert traces["questions/q0004.json"]["verdicts"][0]["reason"] == "parse-fallback"
    assert report.bank["repair_entries"] == 1
    assert {r.category for r in report.records} == {"single_hop", "temporal", "multi_hop", "open_domain"}


def build(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "toy_dataset.json").write_text(json.dumps(DATASET, indent=2) + "\n", encoding="utf-8")
    cassette = Cassette("hashed", DIMENSION, {k: list(v) for k, v in COMPLETIONS.items()})
    cassette.save(out / "toy_cassette.json")
    (out / "toy_config.toml").write_text(CONFIG_TOML, encoding="utf-8")

    config = build_config({"J": J, "dimension": DIMENSION})
    provider = CassetteProvider(cassette, seed=config.seed)
    report = run_experiment(parse_dataset(DATASET), config, provider)
    leftover = provider.remaining()
    assert not leftover, f"cassette not fully consumed: {leftover}"
    expected_paths(report, report.traces)
    emit_report(report, out / "toy_report.json")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check", action="store_true", help="compare against golden/ instead of rewriting")
    args = parser.parse_args()
    if not args.check:
        build(GOLDEN)
        doc = json.loads((GOLDEN / "toy_report.json").read_text(encoding="utf-8"))
        print(render_markdown(doc, variant_label(doc)))
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        build(Path(tmp))
        stale = [p.name for p in sorted(Path(tmp).iterdir())
                 if p.read_bytes() != (GOLDEN / p.name).read_bytes()]
    if stale:
        print(f"stale golden files: {', '.join(stale)}", file=sys.stderr)
        return 1
    print("golden artifacts are up to date")
    return 0


if __name__ == "__main__":
    sys.exit(main())
