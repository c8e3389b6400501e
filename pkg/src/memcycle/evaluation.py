"""Benchmark harness: dataset ingest, lexical metrics, judged accuracy, full runs and reports."""
from __future__ import annotations

import json
import logging
import math
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .config import RunConfig
from .construction import DialogueChunk, Session, construct_chunk
from .errors import CassetteExhausted, IoFailure, MissingEmbedding, ProviderUnavailable, SchemaViolation
from .evolution import evolve_session
from .judge import judge_label
from .memory import MemoryBank, bank_checksum
from .providers import Provider, map_in_order
from .retrieval import generate_answer, refine_and_probe

log = logging.getLogger(__name__)

CATEGORIES = ("multi_hop", "temporal", "open_domain", "single_hop")
CATEGORY_TITLES = {"multi_hop": "Multi-Hop", "temporal": "Temporal", "open_domain": "Open-Domain",
                   "single_hop": "Single-Hop", "overall": "Overall"}
ADVERSARIAL = "adversarial"
ARTICLES = frozenset({"a", "an", "the"})
REPORT_FORMAT = "memcycle-report"

# per-question faults that mark one question failed instead of aborting the run
QUESTION_FAULTS = (ProviderUnavailable, CassetteExhausted, MissingEmbedding)


# dataset

@dataclass(frozen=True)
class QAItem:
    question: str
    gold_answer: str
    category: str


@dataclass(frozen=True)
class ConversationDataset:
    conversation_id: str
    sessions: tuple[Session, ...]
    qa: tuple[QAItem, ...]
    dropped_adversarial: int = 0

    def counts(self) -> tuple[int, int, int]:
        return len(self.sessions), sum(len(s.turns) for s in self.sessions), len(self.qa)


def _require(obj: Mapping, key: str, kind: type | tuple, where: str):
    if key not in obj:
        raise SchemaViolation(f"missing key {key!r}", where or "$")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise SchemaViolation(f"expected {names}", f"{where}.{key}" if where else key)
    return value


def parse_dataset(doc: Any) -> ConversationDataset:
    if not isinstance(doc, dict):
        raise SchemaViolation("dataset must be a JSON object", "$")
    conversation_id = _require(doc, "conversation_id", str, "")
    raw_sessions = _require(doc, "sessions", list, "")
    raw_qa = _require(doc, "qa", list, "")
    sessions = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_sessions):
        where = f"sessions[{i}]"
        if not isinstance(raw, dict):
            raise SchemaViolation("session must be an object", where)
        sid = _require(raw, "session_id", str, where)
        if sid in seen:
            raise SchemaViolation(f"duplicate session id {sid!r}", f"{where}.session_id")
        seen.add(sid)
        timestamp = _require(raw, "timestamp", str, where)
        raw_turns = _require(raw, "turns", list, where)
        if not raw_turns:
            raise SchemaViolation("session has no turns", f"{where}.turns")
        turns = []
        for j, turn in enumerate(raw_turns):
            twhere = f"{where}.turns[{j}]"
            if not isinstance(turn, dict):
                raise SchemaViolation("turn must be an object", twhere)
            text = _require(turn, "text", str, twhere)
            if not text.strip():
                raise SchemaViolation("empty turn text", f"{twhere}.text")
            turns.append(DialogueChunk(sid, _require(turn, "turn_id", str, twhere),
                                       _require(turn, "speaker", str, twhere), text, timestamp))
        sessions.append(Session(sid, timestamp, tuple(turns)))
    qa = []
    dropped = 0
    for i, raw in enumerate(raw_qa):
        where = f"qa[{i}]"
        if not isinstance(raw, dict):
            raise SchemaViolation("qa item must be an object", where)
        question = _require(raw, "question", str, where)
        answer = _require(raw, "answer", (str, int, float), where)
        category = _require(raw, "category", str, where)
        if category == ADVERSARIAL:
            dropped += 1
            continue
        if category not in CATEGORIES:
            raise SchemaViolation(f"unknown category {category!r}", f"{where}.category")
        qa.append(QAItem(question, str(answer), category))
    if dropped:
        log.info("dropped %d adversarial question(s)", dropped)
    return ConversationDataset(conversation_id, tuple(sessions), tuple(qa), dropped)


def ingest_dataset(path: str | Path) -> ConversationDataset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"dataset is not JSON ({exc.msg})", "$") from None
    return parse_dataset(doc)


# metrics

def normalize_tokens(text: str, drop_articles: bool = True) -> list[str]:
    """Lowercase, delete ASCII and Unicode punctuation, split on whitespace, optionally drop a/an/the."""
    text = "".join(ch for ch in str(text).lower()
                   if ch not in string.punctuation and not unicodedata.category(ch).startswith("P"))
    tokens = text.split()
    if drop_articles:
        tokens = [t for t in tokens if t not in ARTICLES]
    return tokens


def token_f1(predicted: str, gold: str) -> float:
    pred = normalize_tokens(predicted)
    ref = normalize_tokens(gold)
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def bleu1(predicted: str, gold: str) -> float:
    """Clipped unigram precision times brevity penalty. Articles are kept."""
    pred = normalize_tokens(predicted, drop_articles=False)
    ref = normalize_tokens(gold, drop_articles=False)
    if not pred:
        return 0.0
    clipped = sum((Counter(pred) & Counter(ref)).values())
    p1 = clipped / len(pred)
    bp = 1.0 if len(pred) >= len(ref) else math.exp(1 - len(ref) / len(pred))
    return bp * p1


def judge_answer(question: str, gold: str, predicted: str, provider: Provider) -> str:
    """CORRECT or WRONG; an unreadable verdict is WRONG so accuracy is never inflated."""
    label, _ = judge_label(question, gold, predicted, provider)
    return label or "WRONG"


# runs

@dataclass
class QuestionRecord:
    index: int
    question: str
    category: str
    gold: str
    predicted: str = ""
    f1: float = 0.0
    bleu1: float = 0.0
    judge_label: str = "WRONG"
    judge_raw: str = ""
    status: str = "ok"
    error: str | None = None
    trace: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def aggregate(records: Sequence[QuestionRecord]) -> dict[str, dict]:
    scored = [r for r in records if r.status == "ok"]
    groups = {c: [r for r in scored if r.category == c] for c in CATEGORIES}
    groups["overall"] = scored
    out = {}
    for name, group in groups.items():
        n = len(group)
        if n == 0:
            out[name] = {"count": 0, "F1": None, "B1": None, "ACC": None}
            continue
        out[name] = {
            "count": n,
            "F1": 100 * math.fsum(r.f1 for r in group) / n,
            "B1": 100 * math.fsum(r.bleu1 for r in group) / n,
            "ACC": 100 * sum(r.judge_label == "CORRECT" for r in group) / n,
        }
    return out


@dataclass
class RunReport:
    conversation_id: str
    config: dict
    records: list[QuestionRecord]
    calls: dict[str, int]
    bank: dict
    dropped_adversarial: int = 0
    aggregates: dict = field(default_factory=dict)
    # written to the traces directory, not to the report itself
    traces: dict[str, dict] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self.aggregates:
            self.aggregates = aggregate(self.records)

    @property
    def partial(self) -> bool:
        return any(r.status != "ok" for r in self.records)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "conversation_id": self.conversation_id,
            "partial": self.partial,
            "config": self.config,
            "dropped_adversarial": self.dropped_adversarial,
            "bank": self.bank,
            "calls": self.calls,
            "aggregates": self.aggregates,
            "questions": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def build_memory(dataset: ConversationDataset, config: RunConfig, provider: Provider,
                 traces: dict[str, dict] | None = None, bank: MemoryBank | None = None,
                 evolve: bool = True) -> MemoryBank:
    """Construct every session in order, evolving each one before the next starts."""
    bank = bank if bank is not None else MemoryBank(dimension=config.dimension)
    for session in dataset.sessions:
        construction_log: list = []
        for chunk in session.turns:
            bank = construct_chunk(bank, chunk, config, provider, construction_log)
        evolution_log: list = []
        if evolve:
            bank = evolve_session(bank, session, config, provider, evolution_log)
        if traces is not None:
            traces[f"sessions/{session.session_id}.json"] = {
                "session_id": session.session_id,
                "construction": construction_log,
                "evolution": evolution_log[0] if evolution_log else None,
            }
    return bank


def answer_question(bank: MemoryBank, index: int, item: QAItem, config: RunConfig,
                    provider: Provider) -> tuple[QuestionRecord, dict]:
    name = f"questions/q{index:04d}.json"
    record = QuestionRecord(index, item.question, item.category, item.gold_answer, trace=name)
    trace: dict = {"question": item.question}
    try:
        H = 0 if config.ablate_R else config.H
        state = refine_and_probe(bank, item.question, provider, k=config.k, H=H, ablate_R=config.ablate_R)
        trace = state.to_trace()
        record.predicted = generate_answer(item.question, state, provider, k=config.k)
        label, raw = judge_label(item.question, item.gold_answer, record.predicted, provider)
        record.judge_label = label or "WRONG"
        record.judge_raw = raw
        record.f1 = token_f1(record.predicted, item.gold_answer)
        record.bleu1 = bleu1(record.predicted, item.gold_answer)
    except QUESTION_FAULTS as exc:
        log.error("question %d failed: %s", index, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        record.f1 = record.bleu1 = 0.0
        record.judge_label = "WRONG"
    trace.update({"answer": record.predicted, "judge_label": record.judge_label,
                  "judge_raw": record.judge_raw, "status": record.status})
    return record, trace


def run_experiment(dataset: ConversationDataset, config: RunConfig, provider: Provider) -> RunReport:
    traces: dict[str, dict] = {}
    bank = build_memory(dataset, config, provider, traces, evolve=not config.ablate_E)
    checksum = bank_checksum(bank)
    items = list(enumerate(dataset.qa, start=1))
    answered = map_in_order(lambda pair: answer_question(bank, pair[0], pair[1], config, provider),
                            items, provider)
    if bank_checksum(bank) != checksum:
        raise AssertionError("answering phase modified the memory bank")
    records = []
    for record, trace in answered:
        records.append(record)
        traces[record.trace] = trace
    return RunReport(
        conversation_id=dataset.conversation_id,
        config=config.snapshot(),
        records=records,
        calls=dict(sorted(provider.calls.items())),
        bank={"entries": len(bank), "checksum": checksum,
              "repair_entries": sum(e.source.value == "repair" for e in bank)},
        dropped_adversarial=dataset.dropped_adversarial,
        traces=traces,
    )


# reports

def _cell(value: float | None) -> str:
    return "—" if value is None else f"{value:.2f}"


def render_markdown(report: Mapping[str, Any], label: str = "memcycle") -> str:
    """Markdown table from a report dict; reads only its ``aggregates``."""
    aggregates = report["aggregates"]
    columns = list(CATEGORIES) + ["overall"]
    head = "| Variant | " + " | ".join(f"{CATEGORY_TITLES[c]} {m}" for c in columns for m in ("F1", "B1", "ACC")) + " |"
    rule = "|---|" + "---:|" * (3 * len(columns))
    row = f"| {label} | " + " | ".join(_cell(aggregates[c][m]) for c in columns for m in ("F1", "B1", "ACC")) + " |"
    counts = ", ".join(f"{CATEGORY_TITLES[c]}={aggregates[c]['count']}" for c in columns)
    lines = [head, rule, row, "", f"Questions scored: {counts}."]
    if report.get("partial"):
        lines.append("Partial report: some questions failed; see the per-question records.")
    return "\n".join(lines) + "\n"


def variant_label(report: Mapping[str, Any]) -> str:
    ablations = report.get("config", {}).get("ablations") or []
    return "memcycle" + "".join(f"/{a}" for a in ablations)


def emit_report(report: RunReport, out_path: str | Path, traces_dir: str | Path | None = None) -> None:
    """Write ``<out>.json`` (as given) plus a sibling ``.md`` table, and traces if requested."""
    out_path = Path(out_path)
    doc = report.to_dict()
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(report.to_json(), encoding="utf-8")
        out_path.with_suffix(".md").write_text(render_markdown(doc, variant_label(doc)), encoding="utf-8")
        if traces_dir is not None:
            write_traces(report.traces, traces_dir)
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc


def write_traces(traces: Mapping[str, dict], traces_dir: str | Path) -> None:
    root = Path(traces_dir)
    for name, trace in traces.items():
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(trace, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def render_svg(report: Mapping[str, Any], out_path: str | Path) -> None:
    """Grouped bar chart of F1/B1/ACC per category."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    aggregates = report["aggregates"]
    columns = list(CATEGORIES) + ["overall"]
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.27
    for offset, metric in enumerate(("F1", "B1", "ACC")):
        values = [aggregates[c][metric] or 0.0 for c in columns]
        xs = [i + (offset - 1) * width for i in range(len(columns))]
        ax.bar(xs, values, width, label=metric)
    ax.set_xticks(range(len(columns)))
    ax.set_xticklabels([CATEGORY_TITLES[c] for c in columns])
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.set_title(variant_label(report))
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def load_report(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"report is not JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != REPORT_FORMAT or "aggregates" not in doc:
        raise SchemaViolation(f"not a {REPORT_FORMAT} document")
    return doc
