"""Diagnosis-guided iterative retrieval and answer generation.

The loop searches with the question, asks the planner whether the evidence is
enough, and while it is not (and budget remains) asks the query reasoner for
one new query aimed at the top gap, unioning its hits into the evidence set.
"""
from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

from .errors import SchemaMismatch, UnparseableResponse
from .memory import MemoryBank, search_top_k
from .parsing import ANSWERABILITY, REWRITE, parse_structured
from .prompts import render_prompt
from .providers import AgentRole, Provider, ask, embed, normalize_text

log = logging.getLogger(__name__)

ANTI_STALL_STEPS = 3


class Decision(str, Enum):
    ANSWERABLE = "ANSWERABLE"
    NOT_ANSWERABLE = "NOT_ANSWERABLE"


class MissingSpeaker(str, Enum):
    SPEAKER_A = "speaker_a"
    SPEAKER_B = "speaker_b"
    BOTH = "both"
    UNKNOWN = "unknown"
    NONE = "none"


@dataclass(frozen=True)
class AnswerabilityVerdict:
    decision: Decision
    reason: str = ""
    key_gaps: tuple[str, ...] = ()
    missing_speaker: MissingSpeaker = MissingSpeaker.NONE
    time_need: str | None = None
    retrieval_guidance: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "decision", Decision(self.decision))
        object.__setattr__(self, "missing_speaker", MissingSpeaker(self.missing_speaker))
        object.__setattr__(self, "key_gaps", tuple(self.key_gaps))
        if self.decision is Decision.ANSWERABLE and self.key_gaps:
            raise ValueError("an ANSWERABLE verdict carries no key gaps")

    @property
    def top_gap(self) -> str:
        return self.key_gaps[0] if self.key_gaps else ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decision"] = self.decision.value
        d["missing_speaker"] = self.missing_speaker.value
        d["key_gaps"] = list(self.key_gaps)
        return d


@dataclass(frozen=True)
class EvidenceItem:
    entry_id: str
    text: str
    score: float
    speaker: str = ""
    timestamp: str = ""


@dataclass
class RetrievalState:
    question: str
    queries: list[str] = field(default_factory=list)
    evidence: dict[str, EvidenceItem] = field(default_factory=dict)
    h: int = 0
    verdicts: list[AnswerabilityVerdict] = field(default_factory=list)
    searches: list[tuple[str, list[str]]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.queries:
            self.queries = [self.question]

    def evidence_ids(self) -> list[str]:
        return list(self.evidence)

    def ranked_evidence(self, limit: int | None = None) -> list[EvidenceItem]:
        ranked = sorted(self.evidence.values(), key=lambda e: (-e.score, e.entry_id))
        return ranked if limit is None else ranked[:limit]

    def to_trace(self) -> dict:
        return {
            "question": self.question,
            "queries": list(self.queries),
            "steps": self.h,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "searches": [{"query": q, "ids": ids} for q, ids in self.searches],
            "evidence_ids": self.evidence_ids(),
        }


def search_into(state: RetrievalState, bank: MemoryBank, query: str, k: int, provider: Provider) -> None:
    """Union the top-``k`` hits for ``query`` into the evidence, keeping each entry's best score."""
    hits = search_top_k(bank, embed(provider, query), k)
    for entry, score in hits:
        known = state.evidence.get(entry.id)
        if known is None or score > known.score:
            state.evidence[entry.id] = EvidenceItem(entry.id, entry.text, score, entry.speaker, entry.timestamp)
    state.searches.append((query, [entry.id for entry, _ in hits]))


def format_evidence_by_speaker(items: Sequence[EvidenceItem]) -> str:
    if not items:
        return "(no memories retrieved)"
    groups: dict[str, list[EvidenceItem]] = {}
    for item in items:
        groups.setdefault(item.speaker or "unknown", []).append(item)
    blocks = []
    for speaker, group in groups.items():
        lines = [f"[{speaker}]"] + [f"- {e.entry_id} ({e.timestamp}): {e.text}" for e in group]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def format_evidence(items: Sequence[EvidenceItem]) -> str:
    if not items:
        return "(no memories retrieved)"
    return "\n".join(f"- [{e.timestamp}] {e.speaker}: {e.text}" for e in items)


def _numbered(queries: Sequence[str]) -> str:
    return "\n".join(f"{i}. {q}" for i, q in enumerate(queries))


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def _bullets(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        line = _BULLET.sub("", line).strip()
        if line and line.upper().rstrip(".") != "NONE":
            items.append(line)
    return items


_SPEAKERS = {
    "speaker-1": MissingSpeaker.SPEAKER_A, "speaker_1": MissingSpeaker.SPEAKER_A,
    "speaker 1": MissingSpeaker.SPEAKER_A, "speaker_a": MissingSpeaker.SPEAKER_A,
    "speaker-a": MissingSpeaker.SPEAKER_A, "speaker a": MissingSpeaker.SPEAKER_A,
    "speaker-2": MissingSpeaker.SPEAKER_B, "speaker_2": MissingSpeaker.SPEAKER_B,
    "speaker 2": MissingSpeaker.SPEAKER_B, "speaker_b": MissingSpeaker.SPEAKER_B,
    "speaker-b": MissingSpeaker.SPEAKER_B, "speaker b": MissingSpeaker.SPEAKER_B,
    "both": MissingSpeaker.BOTH, "unknown": MissingSpeaker.UNKNOWN,
    "none": MissingSpeaker.NONE, "": MissingSpeaker.NONE,
}


def parse_verdict(raw: str) -> AnswerabilityVerdict:
    tags = parse_structured(raw, ANSWERABILITY)
    decision_text = " ".join(tags["decision"].upper().replace("_", " ").replace("-", " ").split())
    if decision_text == "ANSWERABLE":
        decision = Decision.ANSWERABLE
    elif decision_text == "NOT ANSWERABLE":
        decision = Decision.NOT_ANSWERABLE
    else:
        raise SchemaMismatch(f"unrecognised decision {tags['decision']!r}", raw)
    gaps = _bullets(tags.get("key-gaps", "")) if decision is Decision.NOT_ANSWERABLE else []
    speaker = _SPEAKERS.get(tags.get("missing-speaker", "").strip().lower(), MissingSpeaker.UNKNOWN)
    time_need = tags.get("time-need", "").strip()
    return AnswerabilityVerdict(
        decision=decision,
        reason=tags.get("reason", ""),
        key_gaps=tuple(gaps),
        missing_speaker=speaker,
        time_need=None if time_need.upper().rstrip(".") in ("", "NONE") else time_need,
        retrieval_guidance=tags.get("retrieval-guidance", ""),
    )


def _gap_set(gaps: Sequence[str]) -> set[str]:
    return {normalize_text(g) for g in gaps}


def check_answerability(state: RetrievalState, provider: Provider) -> AnswerabilityVerdict:
    """Planner verdict on the current evidence.

    Unparseable output counts as ANSWERABLE. The anti-stall rule is enforced
    here rather than trusted to the model: from step 3 on, a gap list equal
    to the previous step's (case-insensitively, as a set) forces ANSWERABLE.
    """
    prompt = render_prompt(AgentRole.META_ANSWERABILITY, {
        "question": state.question,
        "evidence": format_evidence_by_speaker(state.ranked_evidence()),
        "previous_queries": _numbered(state.queries),
    })
    raw = ask(provider, AgentRole.META_ANSWERABILITY, prompt)
    try:
        verdict = parse_verdict(raw)
    except (UnparseableResponse, SchemaMismatch):
        log.warning("unparseable answerability verdict for %r; answering with current evidence", state.question)
        return AnswerabilityVerdict(Decision.ANSWERABLE, reason="parse-fallback")
    if (
        verdict.decision is Decision.NOT_ANSWERABLE
        and state.h >= ANTI_STALL_STEPS
        and state.verdicts
        and state.verdicts[-1].decision is Decision.NOT_ANSWERABLE
        and _gap_set(verdict.key_gaps) == _gap_set(state.verdicts[-1].key_gaps)
    ):
        return AnswerabilityVerdict(
            Decision.ANSWERABLE,
            reason=f"anti-stall: gaps repeated after {state.h} refinements. {verdict.reason}".strip(),
            missing_speaker=verdict.missing_speaker,
            time_need=verdict.time_need,
            retrieval_guidance=verdict.retrieval_guidance,
        )
    return verdict


def force_novel(query: str, previous: Sequence[str], verdict: AnswerabilityVerdict) -> str:
    """Make ``query`` differ (after normalization) from every previous query."""
    seen = {normalize_text(q) for q in previous}
    if normalize_text(query) not in seen:
        return query
    suffixes = list(verdict.key_gaps)
    if verdict.time_need:
        suffixes.append(verdict.time_need)
    if verdict.retrieval_guidance:
        suffixes.append(verdict.retrieval_guidance)
    for suffix in suffixes:
        candidate = f"{query} {suffix}".strip()
        if normalize_text(candidate) not in seen:
            return candidate
    n = len(previous)
    while True:
        candidate = f"{query} (refinement {n})"
        if normalize_text(candidate) not in seen:
            return candidate
        n += 1


def rewrite_query(state: RetrievalState, verdict: AnswerabilityVerdict, provider: Provider) -> str:
    if verdict.decision is not Decision.NOT_ANSWERABLE:
        raise ValueError("rewrite_query needs a NOT_ANSWERABLE verdict")
    prompt = render_prompt(AgentRole.QUERY_REWRITER, {
        "question": state.question,
        "top_gap": verdict.top_gap or "unspecified",
        "missing_speaker": verdict.missing_speaker.value,
        "time_need": verdict.time_need or "NONE",
        "retrieval_guidance": verdict.retrieval_guidance or "NONE",
        "retrieval_trace": "\n".join(f'{i}. "{q}" -> {", ".join(ids) or "(nothing)"}'
                                     for i, (q, ids) in enumerate(state.searches)),
    })
    raw = ask(provider, AgentRole.QUERY_REWRITER, prompt)
    try:
        query = str(parse_structured(raw, REWRITE)["rewritten_query"]).strip()
        if not query:
            raise SchemaMismatch("empty rewritten_query", raw)
    except (UnparseableResponse, SchemaMismatch):
        log.warning("unparseable rewrite for %r; falling back to question + top gap", state.question)
        query = f"{state.question} {verdict.top_gap}".strip()
    return force_novel(query, state.queries, verdict)


def refine_and_probe(bank: MemoryBank, question: str, provider: Provider, *, k: int = 30, H: int = 3,
                     ablate_R: bool = False) -> RetrievalState:
    """Run the retrieval loop over a frozen bank and return the full state."""
    if H < 0:
        raise ValueError("H must be nonnegative")
    state = RetrievalState(question)
    search_into(state, bank, question, k, provider)
    if ablate_R:
        return state
    while True:
        verdict = check_answerability(state, provider)
        state.verdicts.append(verdict)
        if verdict.decision is Decision.ANSWERABLE or state.h >= H:
            return state
        query = rewrite_query(state, verdict, provider)
        state.queries.append(query)
        search_into(state, bank, query, k, provider)
        state.h += 1


def answer_from_evidence(question: str, items: Sequence[EvidenceItem], provider: Provider) -> str:
    prompt = render_prompt(AgentRole.ANSWERER, {"question": question, "evidence": format_evidence(items)})
    return ask(provider, AgentRole.ANSWERER, prompt).strip()


def generate_answer(question: str, state: RetrievalState, provider: Provider, k: int | None = None) -> str:
    """Answer from the final evidence, best-scored first, capped at ``k`` entries."""
    return answer_from_evidence(question, state.ranked_evidence(k), provider)
