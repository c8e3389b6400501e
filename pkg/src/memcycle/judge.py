"""Single LLM-as-judge call shared by verification and benchmark scoring.

The two callers resolve an unreadable verdict in opposite directions, so this
module only reports ``None`` for it and leaves the policy to them.
"""
from __future__ import annotations

from .errors import SchemaMismatch, UnparseableResponse
from .parsing import JUDGE, parse_structured
from .prompts import render_prompt
from .providers import AgentRole, Provider, ask

LABELS = ("CORRECT", "WRONG")


def judge_label(question: str, gold: str, predicted: str, provider: Provider) -> tuple[str | None, str]:
    """Return ``(label, raw_response)``; label is ``None`` when no valid label was found."""
    prompt = render_prompt(AgentRole.JUDGE, {
        "question": question,
        "gold_answer": gold,
        "generated_answer": predicted,
    })
    raw = ask(provider, AgentRole.JUDGE, prompt)
    try:
        label = str(parse_structured(raw, JUDGE)["label"]).strip().upper()
    except (UnparseableResponse, SchemaMismatch):
        return None, raw
    return (label if label in LABELS else None), raw
