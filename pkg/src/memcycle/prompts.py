"""Prompt templates, one per agent role.

Placeholders are ``{name}``; literal braces are doubled. Substitution is a
single pass, so braces inside slot values are never expanded.
"""
from __future__ import annotations

import re
from typing import Mapping

from .errors import MissingSlot, UnknownSlot
from .providers import AgentRole

_TOKEN_RE = re.compile(r"\{\{|\}\}|\{([a-z_][a-z0-9_]*)\}")

JUDGE = """\
Task: Label an answer to a question as CORRECT or WRONG.

Inputs:
- Question: {question}
- Gold answer: {gold_answer}
- Generated answer: {generated_answer}

Instructions:
- The gold answer is usually concise. The generated answer might be longer, but be generous: as long as it touches on the same topic, count it as CORRECT.
- For time-related questions, be generous with format differences (e.g., "May 7th" vs "7 May").
- Provide a short explanation, then finish with CORRECT or WRONG.
- Return the label in JSON: {{"label": "CORRECT"}} or {{"label": "WRONG"}}.
"""

META_CONSTRUCTION = """\
Role: You are a quality-control checker for a memory construction system. Given one conversation utterance, list every distinct factual statement it contains. Each fact must be an atomic, self-contained statement that could answer a WHO/WHAT/WHEN/WHERE/HOW MANY question.

Rules:
- Extract EVERY fact; do not skip anything. Err on the side of over-extraction.
- Use the speaker's exact words for names, objects, dates, places, and quantities.
- One fact per line. Do NOT merge multiple facts into one line.
- Prefix each fact with the correct speaker name.
- Do NOT interpret emotions, themes, values, or symbolism.
- Do NOT paraphrase; preserve the original phrasing.
- Flag facts already present in existing memory so they are not stored twice, and note any conflict with an existing entry.

Existing memory (most relevant entries):
{memory_view}

Utterance ({timestamp}) by {speaker}:
{utterance}

Output format:
FACTS:
- [Speaker] fact 1
- [Speaker] fact 2
- ...
"""

MEMORY_MANAGER = """\
Role: You are the Memory Manager of a conversational memory system. You edit the memory bank one utterance at a time.

Existing memory (id: [timestamp] speaker: text):
{memory_view}

New utterance ({timestamp}) by {speaker}:
{utterance}

Facts flagged by the planner for this utterance:
{guidance}

Choose the edits that keep memory complete, non-redundant and consistent:
- ADD a fact that is not yet stored. Keep distinct facts as distinct entries; never fold two parallel facts into one.
- UPDATE an existing entry only when the utterance refines or corrects that same fact. Give its id.
- DELETE an entry only when the utterance makes it false. Give its id.
- NONE when the utterance carries nothing worth storing.
Write every stored text as a self-contained sentence naming the speaker, and keep dates and relative time expressions as spoken.

Output a JSON array, for example:
[{{"op": "ADD", "text": "..."}}, {{"op": "UPDATE", "target_id": "m000003", "text": "..."}}, {{"op": "DELETE", "target_id": "m000002"}}]
Output [{{"op": "NONE"}}] if nothing should change.
"""

META_ANSWERABILITY = """\
Role: You are a Meta-Thinker agent for answerability checking in a memory-augmented QA system.

Inputs:
Question: {question}

Retrieved memories grouped by speaker (memory_id, timestamp, snippet):
{evidence}

Previous queries:
{previous_queries}

Goal: Minimize false NOT_ANSWERABLE while staying evidence-grounded.

Blocking-gap test: Return NOT_ANSWERABLE only if a missing fact or unresolved contradiction would CHANGE the final short answer. If a best-supported answer is already stable, return ANSWERABLE.

Granularity policy:
- Time questions: require exact day/date only if the question explicitly asks for it; otherwise accept the best unambiguous granularity.
- Who/what/which: one clearly supported entity is enough unless the question explicitly requests exhaustive output.
- Contradictions: only contradictions that change the final answer are blocking.

Anti-stall: If >=3 previous queries were attempted and the same non-blocking gap repeats, prefer ANSWERABLE at best-supported granularity.

Output format:
<decision>ANSWERABLE|NOT ANSWERABLE</decision>
<reason>1-3 sentences about the asked slot only.</reason>
<key-gaps>Ranked bullets if NOT-ANSWERABLE; NONE otherwise.</key-gaps>
<missing-speaker>speaker-1 | speaker-2 | both | unknown</missing-speaker>
<time-need>Required granularity and missing anchor, or NONE.</time-need>
<retrieval-guidance>Goal, suggested queries, keywords, constraints, avoid terms.</retrieval-guidance>
"""

QUERY_REWRITER = """\
Role: You are an expert Query Rewriter for conversation memory retrieval.

Question: {question}

Meta-Thinker diagnosis:
- Top gap: {top_gap}
- Missing speaker: {missing_speaker}
- Time need: {time_need}
- Guidance (constraints, avoid terms): {retrieval_guidance}

Previous queries and retrieval trace (query -> retrieved memory IDs):
{retrieval_trace}

Task: Generate EXACTLY ONE new retrieval query that targets the top gap and is maximally likely to retrieve new evidence.

Hard rules:
- Do NOT repeat any previous query verbatim or near-verbatim.
- MUST target the top gap only (do not broaden to multiple gaps).
- MUST include all constraints (entity + time/version) exactly as provided.
- If time need is provided, include both the relative phrase (e.g., "last year") and the computed absolute time (e.g., "2021").
- MUST avoid exhausted terms.
- Prefer disambiguation queries if contradiction exists.
- If missing speaker is specified, phrase the query to target that speaker's perspective.

Output format (JSON):
{{"rewritten_query": "...", "strategy": "...", "target_speaker": "..."}}
"""

ANSWERER = """\
You answer questions about a long conversation using only the memories retrieved for you.

Memories ([timestamp] speaker: text), most relevant first:
{evidence}

Question: {question}

Answer in a short phrase or sentence. Resolve relative time expressions against the memory timestamps when the question asks when something happened. If the memories do not contain the answer, reply "Not mentioned in the conversation."
Answer:"""

PROBE_GENERATOR = """\
You write probe questions that test whether a conversation memory system stored a session correctly.

Session {session_id} ({session_timestamp}):
{session_text}

Memory from earlier sessions (for cross-session questions):
{memory_view}

Write exactly {num_probes} question-answer pairs about this session:
- about {single_hop_quota} of type "single_hop": one explicit fact stated in this session (entity, attribute, event detail);
- about {multi_session_quota} of type "multi_session": connect this session with the earlier memory above;
- about {temporal_quota} of type "temporal": dates, relative time expressions and event order.
Answers must be grounded in the text, concise, and specific (names, objects, dates). Phrase temporal answers with the session date where needed.

Output a JSON array:
[{{"question": "...", "answer": "...", "type": "single_hop|multi_session|temporal"}}]
"""

REPAIRER = """\
Role: You are a memory-repair assistant for a two-speaker conversation memory system.
Speakers: speaker_a = {speaker_a}, speaker_b = {speaker_b}.

Inputs:
Question: {question}
Gold Answer: {gold_answer}
Model Answer: {model_answer}
Retrieved evidence snippets (from current memory; may be irrelevant if the info is missing):
{evidence}

Task: Decide whether to add one fact to memory so the system can answer correctly next time.

Decision rules (priority order):
- If Gold Answer is unanswerable, output NOOP.
- If Gold Answer is answerable and Model Answer is wrong or incomplete, output ADD_FACT. The fact should capture the key information from the Gold Answer.
- If Gold Answer and Model Answer are essentially equivalent, output NOOP.

Quality rules:
- Fact must be concrete, specific, and retrieval-friendly (include names, dates, details).
- Preserve relative date expressions verbatim; do NOT convert to absolute dates.
- Assign target_speaker based on who the fact is about.

Output format (JSON):
{{"op": "ADD_FACT | NOOP", "target_speaker": "speaker_a | speaker_b", "fact": "...", "evidence_span": "...", "confidence": 0.0, "reason": "..."}}

Example (information missing from memory):
Question: What does the necklace from Caroline's grandma symbolize?
Gold: Love, faith, and strength.
Model: The memories do not contain information about a necklace.
Output: {{"op": "ADD_FACT", "fact": "Caroline's grandma gave her a necklace from Sweden that symbolizes love, faith, and strength", "evidence_span": "", "confidence": 0.88}}

Example (unanswerable gold answer):
Question: What is Melanie's passport number?
Gold: Not mentioned in the conversation.
Output: {{"op": "NOOP"}}
"""

CONSOLIDATOR = """\
Role: You are a memory deduplication assistant.

New proposed fact:
{new_fact}

Existing memory entries that are semantically similar ([index] (similarity) text):
{candidates}

Decision:
- SKIP: An existing entry already fully covers the new fact.
- MERGE: The new fact describes the same event/attribute as an existing entry and adds a missing detail. Combine into one entry.
- INSERT: The new fact is about a different topic, event, or time period.

Critical rule: Different dates or different occurrences of the same activity = INSERT, never MERGE. Only merge when both texts refer to the exact same single event at the same time.

Output format (JSON):
{{"action": "SKIP | MERGE | INSERT", "merge_target_index": -1, "merged_fact": "", "reason": "..."}}
"""

TEMPLATES: dict[AgentRole, str] = {
    AgentRole.JUDGE: JUDGE,
    AgentRole.META_CONSTRUCTION: META_CONSTRUCTION,
    AgentRole.MEMORY_MANAGER: MEMORY_MANAGER,
    AgentRole.META_ANSWERABILITY: META_ANSWERABILITY,
    AgentRole.QUERY_REWRITER: QUERY_REWRITER,
    AgentRole.ANSWERER: ANSWERER,
    AgentRole.PROBE_GENERATOR: PROBE_GENERATOR,
    AgentRole.REPAIRER: REPAIRER,
    AgentRole.CONSOLIDATOR: CONSOLIDATOR,
}


def placeholders(template: str) -> list[str]:
    """Placeholder names in order of first appearance."""
    names: list[str] = []
    for match in _TOKEN_RE.finditer(template):
        name = match.group(1)
        if name and name not in names:
            names.append(name)
    return names


def render_template(template: str, slots: Mapping[str, str]) -> str:
    wanted = placeholders(template)
    for name in slots:
        if name not in wanted:
            raise UnknownSlot(name)
    for name in wanted:
        if name not in slots:
            raise MissingSlot(name)

    def substitute(match: re.Match) -> str:
        token = match.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        return str(slots[match.group(1)])

    return _TOKEN_RE.sub(substitute, template)


def render_prompt(role: AgentRole | str, slots: Mapping[str, str]) -> str:
    return render_template(TEMPLATES[AgentRole(role)], slots)
