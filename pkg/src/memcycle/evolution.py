"""Backward path: probe the provisional bank after each session and repair it in place.

After a session is constructed, the bank is quizzed with synthetic probe
questions. Every probe the bank fails becomes a repair proposal, and each
proposed fact is consolidated (SKIP / MERGE / INSERT) against the bank as it
evolves, so later repairs see earlier ones.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

from .construction import Session
from .errors import SchemaMismatch, UnparseableResponse
from .judge import judge_label
from .memory import (
    BoundedView,
    EditAction,
    MemoryBank,
    Source,
    ViewPolicy,
    apply_edit,
    search_top_k,
    set_embedding,
)
from .parsing import CONSOLIDATION, PROBES, REPAIR, parse_structured
from .prompts import render_prompt
from .providers import AgentRole, Provider, ask, embed, map_in_order
from .retrieval import EvidenceItem, answer_from_evidence

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)

SINGLE_HOP_SHARE = 0.5


class ProbeType(str, Enum):
    SINGLE_HOP = "single_hop"
    MULTI_SESSION = "multi_session"
    TEMPORAL = "temporal"


_PROBE_TYPES = {
    "single_hop": ProbeType.SINGLE_HOP, "single_session": ProbeType.SINGLE_HOP,
    "factoid": ProbeType.SINGLE_HOP, "single_hop_factoid": ProbeType.SINGLE_HOP,
    "multi_session": ProbeType.MULTI_SESSION, "multi_hop": ProbeType.MULTI_SESSION,
    "cross_session": ProbeType.MULTI_SESSION, "multi_session_reasoning": ProbeType.MULTI_SESSION,
    "temporal": ProbeType.TEMPORAL, "temporal_reasoning": ProbeType.TEMPORAL,
}


@dataclass(frozen=True)
class ProbeQA:
    question: str
    gold_answer: str
    probe_type: ProbeType
    session_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "probe_type", ProbeType(self.probe_type))
        for name in ("question", "gold_answer", "session_id"):
            if not str(getattr(self, name)).strip():
                raise ValueError(f"probe {name} must be nonempty")

    def to_dict(self) -> dict:
        return {"question": self.question, "gold_answer": self.gold_answer,
                "probe_type": self.probe_type.value, "session_id": self.session_id}


@dataclass(frozen=True)
class ProbeResult:
    probe: ProbeQA
    predicted: str
    evidence: tuple[tuple[str, str], ...]
    verdict: str  # "correct" | "failed"
    judge_raw: str = ""

    @property
    def failed(self) -> bool:
        return self.verdict == "failed"

    def to_dict(self) -> dict:
        return {"probe": self.probe.to_dict(), "predicted": self.predicted,
                "evidence_ids": [eid for eid, _ in self.evidence], "verdict": self.verdict,
                "judge_raw": self.judge_raw}


@dataclass(frozen=True)
class RepairProposal:
    op: str  # "ADD_FACT" | "NOOP"
    fact: str = ""
    target_speaker: str = ""
    evidence_span: str = ""
    confidence: float = 0.0
    reason: str = ""

    def __post_init__(self) -> None:
        if self.op not in ("ADD_FACT", "NOOP"):
            raise ValueError(f"unknown repair op {self.op!r}")
        if self.op == "ADD_FACT" and not self.fact.strip():
            raise ValueError("ADD_FACT needs a fact")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConsolidationDecision:
    action: str  # "SKIP" | "MERGE" | "INSERT"
    merge_target_id: str | None = None
    merged_fact: str | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if self.action not in ("SKIP", "MERGE", "INSERT"):
            raise ValueError(f"unknown consolidation action {self.action!r}")
        is_merge = self.action == "MERGE"
        if is_merge != (self.merge_target_id is not None) or is_merge != (self.merged_fact is not None):
            raise ValueError("merge_target_id and merged_fact are required for MERGE and forbidden otherwise")
        if is_merge and not self.merged_fact.strip():
            raise ValueError("merged_fact must be nonempty")

    def to_dict(self) -> dict:
        return asdict(self)


def probe_quotas(J: int) -> tuple[int, int, int]:
    """Soft (single_hop, multi_session, temporal) split of ``J`` probes."""
    single = math.ceil(J * SINGLE_HOP_SHARE)
    rest = J - single
    return single, rest - rest // 2, rest // 2


def probe_from_json(element, session_id: str) -> ProbeQA:
    if not isinstance(element, dict):
        raise ValueError(f"probe must be an object, got {type(element).__name__}")
    question = element.get("question")
    answer = element.get("answer", element.get("gold_answer"))
    kind = str(element.get("type", element.get("probe_type", ""))).strip().lower()
    kind = "_".join(kind.replace("-", " ").split())
    if kind not in _PROBE_TYPES:
        raise ValueError(f"unknown probe type {kind!r}")
    if not isinstance(question, str) or answer is None or isinstance(answer, (dict, list)):
        raise ValueError("probe needs a string question and a scalar answer")
    return ProbeQA(question.strip(), str(answer).strip(), _PROBE_TYPES[kind], session_id)


def format_session(session: Session) -> str:
    return "\n".join(f"[{t.turn_id}] {t.speaker}: {t.text}" for t in session.turns)


def generate_probes(session: Session, prior_view: BoundedView, J: int, provider: Provider) -> list[ProbeQA]:
    if J <= 0:
        raise ValueError("J must be positive")
    single, multi, temporal = probe_quotas(J)
    prompt = render_prompt(AgentRole.PROBE_GENERATOR, {
        "session_id": session.session_id,
        "session_timestamp": session.timestamp,
        "session_text": format_session(session),
        "memory_view": "\n".join(f"- [{e.timestamp}] {e.speaker}: {e.text}" for e in prior_view.entries)
                       or "(none)",
        "num_probes": str(J),
        "single_hop_quota": str(single),
        "multi_session_quota": str(multi),
        "temporal_quota": str(temporal),
    })
    raw = ask(provider, AgentRole.PROBE_GENERATOR, prompt)
    try:
        elements = parse_structured(raw, PROBES)
    except (UnparseableResponse, SchemaMismatch):
        log.warning("session %s: unparseable probe set; committing without evolution", session.session_id)
        return []
    probes = []
    for position, element in enumerate(elements):
        try:
            probes.append(probe_from_json(element, session.session_id))
        except ValueError as exc:
            log.warning("session %s: dropping probe #%d: %s", session.session_id, position, exc)
    if len(probes) > J:
        log.warning("session %s: %d probes returned, keeping the first %d", session.session_id, len(probes), J)
        probes = probes[:J]
    elif len(probes) < J:
        log.warning("session %s: only %d of %d probes usable", session.session_id, len(probes), J)
    return probes


def verify_probe(bank: MemoryBank, probe: ProbeQA, k: int, provider: Provider) -> ProbeResult:
    """One-shot retrieval + answer + judge. An unreadable judge verdict counts as correct."""
    hits = search_top_k(bank, embed(provider, probe.question), k)
    items = [EvidenceItem(e.id, e.text, s, e.speaker, e.timestamp) for e, s in hits]
    predicted = answer_from_evidence(probe.question, items, provider)
    label, raw = judge_label(probe.question, probe.gold_answer, predicted, provider)
    if label is None:
        log.warning("probe %r: unreadable judge verdict, not repairing", probe.question)
    verdict = "failed" if label == "WRONG" else "correct"
    return ProbeResult(probe, predicted, tuple((i.entry_id, i.text) for i in items), verdict, raw)


def resolve_speaker(value: str, speakers: Sequence[str]) -> str:
    key = value.strip().lower().replace("-", "_").replace(" ", "_")
    aliases = {"speaker_a": 0, "speaker_1": 0, "speaker_b": 1, "speaker_2": 1}
    if key in aliases and aliases[key] < len(speakers):
        return speakers[aliases[key]]
    return value.strip()


def propose_repair(result: ProbeResult, provider: Provider,
                   speakers: Sequence[str] = ("speaker_a", "speaker_b")) -> RepairProposal:
    if not result.failed:
        raise ValueError("propose_repair needs a failed probe")
    names = list(speakers) + ["unknown"] * (2 - len(speakers))
    prompt = render_prompt(AgentRole.REPAIRER, {
        "speaker_a": names[0],
        "speaker_b": names[1],
        "question": result.probe.question,
        "gold_answer": result.probe.gold_answer,
        "model_answer": result.predicted,
        "evidence": "\n".join(f"- {eid}: {text}" for eid, text in result.evidence) or "(none)",
    })
    raw = ask(provider, AgentRole.REPAIRER, prompt)
    try:
        payload = parse_structured(raw, REPAIR)
        op = str(payload["op"]).strip().upper()
        if op == "NOOP":
            return RepairProposal("NOOP", reason=str(payload.get("reason", "")))
        try:
            confidence = min(1.0, max(0.0, float(payload.get("confidence", 0.0))))
        except (TypeError, ValueError):
            confidence = 0.0
        return RepairProposal(
            op=op,
            fact=str(payload.get("fact", "")).strip(),
            target_speaker=resolve_speaker(str(payload.get("target_speaker", "")), speakers),
            evidence_span=str(payload.get("evidence_span", "")),
            confidence=confidence,
            reason=str(payload.get("reason", "")),
        )
    except (UnparseableResponse, SchemaMismatch, ValueError):
        log.warning("probe %r: unusable repair proposal, treating as NOOP", result.probe.question)
        return RepairProposal("NOOP", reason="parse-fallback")


def consolidate_fact(bank: MemoryBank, proposal: RepairProposal, theta: float, provider: Provider,
                     max_neighbors: int = 5) -> ConsolidationDecision:
    """Decide how a repair fact enters ``bank``; no similar neighbour means INSERT without a model call."""
    if proposal.op != "ADD_FACT":
        raise ValueError("consolidate_fact needs an ADD_FACT proposal")
    vector = embed(provider, proposal.fact)
    neighbors = [(e, s) for e, s in search_top_k(bank, vector, max_neighbors) if s >= theta] if len(bank) else []
    if not neighbors:
        return ConsolidationDecision("INSERT", reason="no similar entry")
    prompt = render_prompt(AgentRole.CONSOLIDATOR, {
        "new_fact": proposal.fact,
        "candidates": "\n".join(f"[{i}] ({s:.2f}) {e.text}" for i, (e, s) in enumerate(neighbors)),
    })
    raw = ask(provider, AgentRole.CONSOLIDATOR, prompt)
    try:
        payload = parse_structured(raw, CONSOLIDATION)
    except (UnparseableResponse, SchemaMismatch):
        log.warning("unparseable consolidation decision; inserting %r", proposal.fact)
        return ConsolidationDecision("INSERT", reason="parse-fallback")
    action = str(payload["action"]).strip().upper()
    reason = str(payload.get("reason", ""))
    if action == "SKIP":
        return ConsolidationDecision("SKIP", reason=reason)
    if action == "MERGE":
        index = payload.get("merge_target_index")
        merged = str(payload.get("merged_fact") or "").strip()
        if isinstance(index, int) and not isinstance(index, bool) and 0 <= index < len(neighbors) and merged:
            return ConsolidationDecision("MERGE", neighbors[index][0].id, merged, reason)
        log.warning("MERGE with target %r over %d neighbours is unusable; inserting", index, len(neighbors))
        return ConsolidationDecision("INSERT", reason=f"invalid merge downgraded. {reason}".strip())
    if action != "INSERT":
        log.warning("unknown consolidation action %r; inserting", action)
    return ConsolidationDecision("INSERT", reason=reason)


def prior_view(bank: MemoryBank, session: Session, limit: int) -> BoundedView:
    """Most recent entries that came from earlier sessions."""
    earlier = [e for e in bank if e.session_id != session.session_id]
    return BoundedView(tuple(earlier[-limit:]), ViewPolicy.RECENT, limit)


def evolve_session(bank: MemoryBank, session: Session, config: RunConfig, provider: Provider,
                   records: list | None = None) -> MemoryBank:
    """Return the repaired bank for ``session``; the input bank is the provisional one."""
    if config.ablate_E:
        return bank
    provisional = bank
    probes = generate_probes(session, prior_view(bank, session, config.view_limit), config.J, provider)
    results = map_in_order(lambda p: verify_probe(provisional, p, config.k, provider), probes, provider)
    speakers = session.speakers()
    proposals = [propose_repair(r, provider, speakers) for r in results if r.failed]

    decisions = []
    for proposal in proposals:
        if proposal.op != "ADD_FACT":
            continue
        decision = consolidate_fact(bank, proposal, config.theta, provider, config.max_neighbors)
        decisions.append(decision)
        if decision.action == "MERGE":
            bank = apply_edit(bank, EditAction.update(decision.merge_target_id, decision.merged_fact))
            bank = set_embedding(bank, decision.merge_target_id, embed(provider, decision.merged_fact))
        elif decision.action == "INSERT":
            bank = apply_edit(bank, EditAction.add(
                proposal.fact,
                timestamp=session.timestamp,
                session_id=session.session_id,
                speaker=proposal.target_speaker,
                source=Source.REPAIR,
                embedding=embed(provider, proposal.fact),
            ))

    record = {
        "session_id": session.session_id,
        "bank_size_before": len(provisional),
        "bank_size_after": len(bank),
        "probes": [p.to_dict() for p in probes],
        "results": [r.to_dict() for r in results],
        "proposals": [p.to_dict() for p in proposals],
        "decisions": [d.to_dict() for d in decisions],
    }
    log.info(json.dumps({k: record[k] for k in ("session_id", "bank_size_before", "bank_size_after")}))
    if records is not None:
        records.append(record)
    return bank
