"""Forward-path memory construction.

For each dialogue turn the planner lists the facts worth keeping, the memory
manager turns the turn (plus those facts) into atomic edits, and the edits are
applied and embedded. Semantic faults in model output never abort the stream:
bad guidance degrades to no guidance and a bad edit list degrades to NONE.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

from .errors import MalformedAction, SchemaMismatch, UnknownTarget, UnparseableResponse
from .memory import (
    BoundedView,
    EditAction,
    EditKind,
    MemoryBank,
    Source,
    ViewPolicy,
    apply_edit,
    bounded_view,
    set_embedding,
)
from .parsing import EDIT_ACTIONS, parse_structured
from .prompts import render_prompt
from .providers import AgentRole, Provider, ask, embed

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)

_FACT_LINE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*(?:\[(?P<speaker>[^\]]+)\]\s*:?\s*)?(?P<fact>.*?)\s*$")
_HEADER = re.compile(r"^\s*\**FACTS\**\s*:", re.IGNORECASE)


@dataclass(frozen=True)
class DialogueChunk:
    session_id: str
    turn_id: str
    speaker: str
    text: str
    timestamp: str = ""

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError(f"turn {self.turn_id}: text must be nonempty")


@dataclass(frozen=True)
class Session:
    """An ordered group of turns sharing one session timestamp."""

    session_id: str
    timestamp: str
    turns: tuple[DialogueChunk, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError(f"session {self.session_id}: no turns")

    def speakers(self) -> list[str]:
        seen: list[str] = []
        for turn in self.turns:
            if turn.speaker not in seen:
                seen.append(turn.speaker)
        return seen


@dataclass(frozen=True)
class ConstructionGuidance:
    facts: tuple[str, ...] = ()
    raw: str = ""


def format_view(view: BoundedView) -> str:
    if not view.entries:
        return "(empty)"
    return "\n".join(f"{e.id}: [{e.timestamp}] {e.speaker}: {e.text}" for e in view.entries)


def parse_guidance(raw: str, default_speaker: str) -> ConstructionGuidance | None:
    """Facts from a ``FACTS:`` block; ``None`` when the response has no such block."""
    lines = raw.splitlines()
    start = next((i for i, line in enumerate(lines) if _HEADER.match(line)), None)
    if start is None:
        return None
    facts = []
    # content after the header on the same line ("FACTS: - [A] ...") is ignored on purpose
    for line in lines[start + 1:]:
        match = _FACT_LINE.match(line)
        if not match or not match.group("fact"):
            continue
        speaker = (match.group("speaker") or default_speaker).strip()
        facts.append(f"[{speaker}] {match.group('fact')}")
    return ConstructionGuidance(tuple(facts), raw)


def construction_guidance(chunk: DialogueChunk, view: BoundedView, provider: Provider) -> ConstructionGuidance:
    prompt = render_prompt(AgentRole.META_CONSTRUCTION, {
        "memory_view": format_view(view),
        "timestamp": chunk.timestamp,
        "speaker": chunk.speaker,
        "utterance": chunk.text,
    })
    raw = ask(provider, AgentRole.META_CONSTRUCTION, prompt)
    guidance = parse_guidance(raw, chunk.speaker)
    if guidance is None:
        log.warning("turn %s: unparseable construction guidance, continuing without it", chunk.turn_id)
        return ConstructionGuidance((), raw)
    return guidance


def _clean(value) -> str | None:
    if value is None:
        return None
    value = str(value).strip()
    return value or None


def action_from_json(element, chunk: DialogueChunk) -> EditAction:
    """Validate one element of the manager's JSON array."""
    if not isinstance(element, dict):
        raise MalformedAction(f"action must be an object, got {type(element).__name__}")
    op = (_clean(element.get("op")) or _clean(element.get("action")) or "").upper()
    target = _clean(element.get("target_id"))
    text = _clean(element.get("text"))
    if op == "ADD":
        return EditAction(EditKind.ADD, target_id=target, new_text=text, timestamp=chunk.timestamp,
                          session_id=chunk.session_id, speaker=chunk.speaker, source=Source.CONSTRUCTION)
    if op == "UPDATE":
        return EditAction(EditKind.UPDATE, target_id=target, new_text=text)
    if op == "DELETE":
        return EditAction(EditKind.DELETE, target_id=target)
    if op == "NONE":
        return EditAction.none()
    raise MalformedAction(f"unknown op {op!r}")


def decide_edit(chunk: DialogueChunk, view: BoundedView, guidance: ConstructionGuidance, provider: Provider,
                single_action: bool = False) -> list[EditAction]:
    prompt = render_prompt(AgentRole.MEMORY_MANAGER, {
        "memory_view": format_view(view),
        "timestamp": chunk.timestamp,
        "speaker": chunk.speaker,
        "utterance": chunk.text,
        "guidance": "\n".join(f"- {f}" for f in guidance.facts) or "(none)",
    })
    raw = ask(provider, AgentRole.MEMORY_MANAGER, prompt)
    try:
        elements = parse_structured(raw, EDIT_ACTIONS)
    except (UnparseableResponse, SchemaMismatch):
        log.warning("turn %s: unparseable memory-manager response, treating as NONE", chunk.turn_id)
        return [EditAction.none()]
    actions = []
    for position, element in enumerate(elements):
        try:
            action = action_from_json(element, chunk)
        except MalformedAction as exc:
            log.warning("turn %s: dropping action #%d: %s", chunk.turn_id, position, exc)
            continue
        if action.kind is not EditKind.NONE:
            actions.append(action)
    if single_action:
        actions = actions[:1]
    return actions or [EditAction.none()]


def construct_chunk(bank: MemoryBank, chunk: DialogueChunk, config: RunConfig, provider: Provider,
                    records: list | None = None) -> MemoryBank:
    """Apply one turn to the bank and return the new bank.

    A structured record of the step is logged and, when given, appended to
    ``records``.
    """
    anchor = None
    if config.view_policy is not ViewPolicy.RECENT:
        anchor = embed(provider, chunk.text)
    view = bounded_view(bank, anchor, config.view_policy, config.view_limit)
    if config.ablate_C:
        guidance = ConstructionGuidance()
    else:
        guidance = construction_guidance(chunk, view, provider)
    actions = decide_edit(chunk, view, guidance, provider, single_action=config.single_action)

    applied = []
    for action in actions:
        if action.kind is EditKind.ADD:
            action = replace(action, embedding=embed(provider, action.new_text))
        try:
            new_bank = apply_edit(bank, action)
        except UnknownTarget as exc:
            log.warning("turn %s: skipping %s: %s", chunk.turn_id, action.kind.value, exc)
            continue
        entry_id = action.target_id
        if action.kind is EditKind.ADD:
            entry_id = bank.next_id()
        elif action.kind is EditKind.UPDATE:
            new_bank = set_embedding(new_bank, entry_id, embed(provider, action.new_text))
        bank = new_bank
        applied.append({"op": action.kind.value, "entry_id": entry_id})

    for entry in bank.entries:
        if not entry.embedded:
            bank = set_embedding(bank, entry.id, embed(provider, entry.text))

    record = {
        "session_id": chunk.session_id,
        "turn_id": chunk.turn_id,
        "guidance_facts": len(guidance.facts),
        "actions": applied,
        "bank_size": len(bank),
    }
    log.info(json.dumps(record))
    if records is not None:
        records.append(record)
    return bank
