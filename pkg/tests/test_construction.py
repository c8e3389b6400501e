from __future__ import annotations

import json
import logging
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cassette_provider
from memcycle.config import build_config
from memcycle.construction import (
    ConstructionGuidance,
    DialogueChunk,
    construct_chunk,
    construction_guidance,
    decide_edit,
    parse_guidance,
)
from memcycle.memory import BoundedView, EditKind, MemoryBank, Source, ViewPolicy

EMPTY_VIEW = BoundedView((), ViewPolicy.RECENT, 10)


def chunk(n: int, text: str = "I play the clarinet.", speaker: str = "Mel") -> DialogueChunk:
    return DialogueChunk("s1", f"t{n}", speaker, text, "1 May 2023")


def adds(*texts):
    return json.dumps([{"op": "ADD", "text": t} for t in texts])


def test_guidance_parses_fact_lines():
    provider = cassette_provider({"meta_construction": [
        "FACTS:\n- [Melanie] Melanie plays the clarinet\n- [Melanie] Melanie plays the violin"]})
    guidance = construction_guidance(chunk(1), EMPTY_VIEW, provider)
    assert guidance.facts == ("[Melanie] Melanie plays the clarinet", "[Melanie] Melanie plays the violin")


def test_guidance_empty_and_garbled(caplog):
    assert parse_guidance("FACTS:", "Mel") == ConstructionGuidance((), "FACTS:")
    provider = cassette_provider({"meta_construction": ["garbled"]})
    with caplog.at_level(logging.WARNING):
        guidance = construction_guidance(chunk(1), EMPTY_VIEW, provider)
    assert guidance.facts == ()
    assert "unparseable construction guidance" in caplog.text


def test_guidance_defaults_speaker():
    assert parse_guidance("FACTS:\n1. likes jazz", "Mel").facts == ("[Mel] likes jazz",)


@pytest.mark.parametrize("response, kinds", [
    ('[{"op":"ADD","text":"Caroline moved from Sweden 4 years ago"}]', [EditKind.ADD]),
    ("[]", [EditKind.NONE]),
    ('[{"op":"UPDATE"}]', [EditKind.NONE]),
    ("I would add nothing", [EditKind.NONE]),
    ('[{"op":"DELETE","target_id":"m000001"}, {"op":"MERGE"}, {"op":"ADD","text":"x"}]',
     [EditKind.DELETE, EditKind.ADD]),
])
def test_decide_edit_validation(response, kinds):
    provider = cassette_provider({"memory_manager": [response]})
    actions = decide_edit(chunk(1), EMPTY_VIEW, ConstructionGuidance(), provider)
    assert [a.kind for a in actions] == kinds


def test_single_action_keeps_first_only():
    provider = cassette_provider({"memory_manager": [adds("a", "b")]})
    actions = decide_edit(chunk(1), EMPTY_VIEW, ConstructionGuidance(), provider, single_action=True)
    assert [a.new_text for a in actions] == ["a"]


def test_construct_chunk_adds_with_metadata_and_embeddings(config):
    provider = cassette_provider({"meta_construction": ["FACTS:\n- [Mel] plays clarinet"],
                                  "memory_manager": [adds("Mel plays the clarinet.", "Mel plays the violin.")]})
    records: list = []
    bank = construct_chunk(MemoryBank(), chunk(1), config, provider, records)
    assert len(bank) == 2
    for entry in bank:
        assert (entry.source, entry.session_id, entry.timestamp, entry.speaker) == \
               (Source.CONSTRUCTION, "s1", "1 May 2023", "Mel")
        assert entry.embedded and len(entry.embedding) == 16
    assert records[0]["actions"] == [{"op": "ADD", "entry_id": "m000001"}, {"op": "ADD", "entry_id": "m000002"}]
    assert records[0]["guidance_facts"] == 1


def test_update_across_chunks_keeps_id_and_reembeds(config):
    provider = cassette_provider({
        "meta_construction": ["FACTS:", "FACTS:"],
        "memory_manager": [adds("Mel is moving to Lisbon."),
                           json.dumps([{"op": "UPDATE", "target_id": "m000001", "text": "Mel moved to Lisbon."}])],
    })
    bank = construct_chunk(MemoryBank(), chunk(1), config, provider)
    first = bank["m000001"]
    bank = construct_chunk(bank, chunk(2, "I moved."), config, provider)
    assert bank.ids() == ["m000001"]
    assert bank["m000001"].text == "Mel moved to Lisbon."
    assert bank["m000001"].embedding != first.embedding
    assert bank["m000001"].embedding == provider.embed("Mel moved to Lisbon.")


def test_none_leaves_bank_unchanged_and_unknown_target_is_skipped(config):
    provider = cassette_provider({"meta_construction": ["FACTS:"] * 2,
                                  "memory_manager": ['[{"op": "NONE"}]',
                                                     '[{"op": "DELETE", "target_id": "m000042"}]']})
    bank = MemoryBank()
    assert construct_chunk(bank, chunk(1), config, provider) == bank
    assert len(construct_chunk(bank, chunk(2), config, provider)) == 0


def test_ablate_c_skips_guidance(config):
    cfg = replace(config, ablations=frozenset({"C"}))
    provider = cassette_provider({"memory_manager": [adds("x"), adds("y")]})
    bank = MemoryBank()
    for n in range(2):
        bank = construct_chunk(bank, chunk(n), cfg, provider)
    assert provider.calls == {"memory_manager": 2}


def test_recent_policy_does_not_embed_anchor():
    cfg = build_config({"view_policy": "recent"})
    provider = cassette_provider({"meta_construction": ["FACTS:"], "memory_manager": ['[{"op":"NONE"}]']})
    construct_chunk(MemoryBank(), chunk(1), cfg, provider)
    assert provider.embed_calls == 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["NONE", "ADD"]), min_size=1, max_size=8))
def test_construction_never_fabricates(ops):
    cfg = build_config({"ablations": ["C"]})
    script = [adds(f"fact {i}") if op == "ADD" else '[{"op": "NONE"}]' for i, op in enumerate(ops)]
    provider = cassette_provider({"memory_manager": script})
    bank = MemoryBank()
    for i in range(len(ops)):
        bank = construct_chunk(bank, chunk(i), cfg, provider)
    assert len(bank) == ops.count("ADD")
    assert all(e.embedded for e in bank)
    assert provider.calls["memory_manager"] == len(ops)
