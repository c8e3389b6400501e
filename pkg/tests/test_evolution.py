from __future__ import annotations

import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cassette_provider, label
from memcycle.construction import DialogueChunk, Session
from memcycle.memory import BoundedView, EditAction, MemoryBank, Source, ViewPolicy, apply_edit, dumps_bank
from memcycle.providers import hashed_embedding
from memcycle.evolution import (
    ProbeQA,
    ProbeResult,
    ProbeType,
    RepairProposal,
    consolidate_fact,
    evolve_session,
    generate_probes,
    probe_quotas,
    propose_repair,
    verify_probe,
)

D = 16
SESSION = Session("s1", "1:56 pm on 8 May, 2023", (
    DialogueChunk("s1", "t1", "Caroline", "I went to the LGBTQ support group yesterday.", "1:56 pm on 8 May, 2023"),
    DialogueChunk("s1", "t2", "Melanie", "I saw Matt Patterson live last week!", "1:56 pm on 8 May, 2023"),
))
NO_VIEW = BoundedView((), ViewPolicy.RECENT, 10)


def bank_with(*texts: str, session: str = "s1") -> MemoryBank:
    bank = MemoryBank()
    for text in texts:
        bank = apply_edit(bank, EditAction.add(text, session_id=session, speaker="Melanie",
                                               embedding=hashed_embedding(text, D)))
    return bank


def probes_json(n: int, kind: str = "single_hop") -> str:
    return json.dumps([{"question": f"question {i}?", "answer": f"answer {i}", "type": kind} for i in range(n)])


def add_fact(fact: str, speaker: str = "speaker_b") -> str:
    return json.dumps({"op": "ADD_FACT", "target_speaker": speaker, "fact": fact, "confidence": 0.88})


def test_quotas():
    assert probe_quotas(5) == (3, 1, 1)
    assert probe_quotas(1) == (1, 0, 0)
    assert sum(probe_quotas(8)) == 8


def test_generate_probes_examples(caplog):
    provider = cassette_provider({"probe_generator": [probes_json(5)]})
    assert len(generate_probes(SESSION, NO_VIEW, 5, provider)) == 5

    temporal = json.dumps([{"question": "What did Caroline do at 1:56 pm on May 8, 2023?",
                            "answer": "support group", "type": "temporal"}])
    probes = generate_probes(SESSION, NO_VIEW, 5, cassette_provider({"probe_generator": [temporal]}))
    assert probes[0].probe_type is ProbeType.TEMPORAL

    mixed = json.loads(probes_json(3)) + [{"question": "no answer"}, "not an object"]
    with caplog.at_level("WARNING"):
        probes = generate_probes(SESSION, NO_VIEW, 5, cassette_provider({"probe_generator": [json.dumps(mixed)]}))
    assert len(probes) == 3
    assert caplog.text.count("dropping probe") == 2
    assert generate_probes(SESSION, NO_VIEW, 5, cassette_provider({"probe_generator": ["no idea"]})) == []


def test_verify_probe_verdicts():
    bank = bank_with("Melanie saw a concert.")
    probe = ProbeQA("Which artist did Melanie see?", "Matt Patterson", ProbeType.SINGLE_HOP, "s1")
    provider = cassette_provider({"answerer": ["The artist is not mentioned", "Matt Patterson", "Matt Patterson"],
                                  "judge": [label("WRONG"), label("CORRECT"), "They seem to agree."]})
    results = [verify_probe(bank, probe, 5, provider) for _ in range(3)]
    assert [r.verdict for r in results] == ["failed", "correct", "correct"]
    assert results[0].evidence[0][0] == "m000001"


def failed(question="What does the necklace symbolize?", gold="Love, faith, and strength."):
    return ProbeResult(ProbeQA(question, gold, ProbeType.SINGLE_HOP, "s1"), "unknown", (), "failed")


def test_propose_repair_examples():
    fact = "Caroline's grandma gave her a necklace from Sweden that symbolizes love, faith, and strength"
    provider = cassette_provider({"repairer": [add_fact(fact, "speaker_a"), '{"op": "NOOP"}', "garbled"]})
    proposal = propose_repair(failed(), provider, ["Caroline", "Melanie"])
    assert (proposal.op, proposal.fact, proposal.confidence, proposal.target_speaker) == \
           ("ADD_FACT", fact, 0.88, "Caroline")
    assert propose_repair(failed(gold="Not mentioned in the conversation"), provider).op == "NOOP"
    garbled = propose_repair(failed(), provider)
    assert (garbled.op, garbled.reason) == ("NOOP", "parse-fallback")
    with pytest.raises(ValueError):
        propose_repair(replace(failed(), verdict="correct"), provider)


def proposal(fact: str) -> RepairProposal:
    return RepairProposal("ADD_FACT", fact=fact, target_speaker="Melanie")


def test_consolidation_examples():
    bank = bank_with("Melanie saw Matt Patterson live.")
    provider = cassette_provider({"consolidator": ['{"action": "SKIP", "reason": "covered"}']})
    assert consolidate_fact(bank, proposal("Melanie saw Matt Patterson live."), 0.55, provider).action == "SKIP"

    # no neighbour above the threshold: no model call at all
    lonely = consolidate_fact(bank, proposal("Caroline paints sunsets."), 0.55, cassette_provider({}))
    assert lonely.action == "INSERT"

    camping = "Melanie went on a camping trip in 2021."
    near = apply_edit(MemoryBank(), EditAction.add("Melanie went on a camping trip in 2023.",
                                                   embedding=hashed_embedding(camping, D)))
    provider = cassette_provider({"consolidator": ['{"action": "INSERT", "reason": "different year"}',
                                                   '{"action": "MERGE", "merge_target_index": 3, "merged_fact": "x"}',
                                                   "unreadable",
                                                   '{"action": "MERGE", "merge_target_index": 0, "merged_fact": "m"}']})
    assert consolidate_fact(near, proposal(camping), 0.55, provider).action == "INSERT"
    assert consolidate_fact(near, proposal(camping), 0.55, provider).action == "INSERT"  # bad index downgraded
    assert consolidate_fact(near, proposal(camping), 0.55, provider).action == "INSERT"  # parse fallback
    merge = consolidate_fact(near, proposal(camping), 0.55, provider)
    assert (merge.action, merge.merge_target_id, merge.merged_fact) == ("MERGE", "m000001", "m")


def config_j(config, J):
    return replace(config, J=J)


def test_all_correct_is_identity(config):
    bank = bank_with("Caroline went to a support group.", "Melanie saw Matt Patterson.")
    provider = cassette_provider({"probe_generator": [probes_json(3)], "answerer": ["a"] * 3,
                                  "judge": [label("CORRECT")] * 3})
    evolved = evolve_session(bank, SESSION, config_j(config, 3), provider)
    assert dumps_bank(evolved) == dumps_bank(bank)
    assert provider.calls == {"probe_generator": 1, "answerer": 3, "judge": 3}


def test_failures_insert_repairs_and_duplicates_skip(config):
    bank = bank_with("Caroline went to a support group.")
    fact = "Melanie saw Matt Patterson live in concert."
    provider = cassette_provider({
        "probe_generator": [probes_json(3)],
        "answerer": ["?"] * 3,
        "judge": [label("WRONG"), label("CORRECT"), label("WRONG")],
        "repairer": [add_fact(fact), add_fact(fact)],
        "consolidator": ['{"action": "SKIP", "reason": "entry [0] already covers it"}'],
    })
    records: list = []
    evolved = evolve_session(bank, SESSION, config_j(config, 3), provider, records)
    assert len(evolved) == len(bank) + 1
    new = evolved["m000002"]
    assert (new.source, new.speaker, new.timestamp, new.text) == (Source.REPAIR, "Melanie", SESSION.timestamp, fact)
    assert [d["action"] for d in records[0]["decisions"]] == ["INSERT", "SKIP"]
    assert provider.calls == {"probe_generator": 1, "answerer": 3, "judge": 3, "repairer": 2, "consolidator": 1}


def test_merge_updates_and_reembeds(config):
    bank = bank_with("Melanie saw a band.")
    provider = cassette_provider({
        "probe_generator": [probes_json(1)], "answerer": ["?"], "judge": [label("WRONG")],
        "repairer": [add_fact("Melanie saw a band.")],
        "consolidator": ['{"action": "MERGE", "merge_target_index": 0, "merged_fact": "Melanie saw Matt Patterson."}'],
    })
    evolved = evolve_session(bank, SESSION, config_j(config, 1), provider)
    assert evolved.ids() == ["m000001"]
    assert evolved["m000001"].text == "Melanie saw Matt Patterson."
    assert evolved["m000001"].embedding == hashed_embedding("Melanie saw Matt Patterson.", D)


def test_ablate_e_consumes_nothing(config):
    bank = bank_with("x")
    provider = cassette_provider({})
    assert evolve_session(bank, SESSION, replace(config, ablations=frozenset({"E"})), provider) is bank
    assert not provider.calls and provider.embed_calls == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["correct", "noop", "insert"]), min_size=1, max_size=5))
def test_growth_law(outcomes):
    from memcycle.config import build_config

    config = build_config({"dimension": D, "J": len(outcomes)})
    judge = [label("CORRECT") if o == "correct" else label("WRONG") for o in outcomes]
    repairs = ['{"op": "NOOP"}' if o == "noop" else add_fact(f"brand new fact number {i}")
               for i, o in enumerate(outcomes) if o != "correct"]
    provider = cassette_provider({"probe_generator": [probes_json(len(outcomes))], "answerer": ["?"] * len(outcomes),
                                  "judge": judge, "repairer": repairs}, dimension=D)
    bank = bank_with("seed fact")
    evolved = evolve_session(bank, SESSION, config, provider)
    inserted = outcomes.count("insert")
    assert len(evolved) == len(bank) + inserted
    assert sum(e.source is Source.REPAIR for e in evolved) == inserted
    assert set(bank.ids()) <= set(evolved.ids())
    assert provider.calls["repairer"] == len(repairs) if repairs else "repairer" not in provider.calls
