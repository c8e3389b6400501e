"""Memory bank data model: entries, atomic edits, cosine search, bounded views, JSONL persistence.

Banks are treated as values. ``apply_edit`` and ``set_embedding`` return a new
bank and leave the input untouched, so a bank handed to the answering phase is
a frozen snapshot by construction.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    IoFailure,
    MalformedAction,
    MissingAnchor,
    SchemaViolation,
    UnknownTarget,
)

BANK_FORMAT = "memcycle-bank"
BANK_VERSION = 1
NORM_TOLERANCE = 1e-6
ID_WIDTH = 6


class Source(str, Enum):
    CONSTRUCTION = "construction"
    REPAIR = "repair"


class EditKind(str, Enum):
    ADD = "ADD"
    UPDATE = "UPDATE"
    DELETE = "DELETE"
    NONE = "NONE"


class ViewPolicy(str, Enum):
    RECENT = "recent"
    SEMANTIC = "semantic"
    HYBRID = "hybrid"


def is_zero(vector: Sequence[float]) -> bool:
    return all(v == 0.0 for v in vector)


@dataclass(frozen=True)
class MemoryEntry:
    """One stored fact.

    An empty or all-zero embedding marks an entry that has not been embedded
    yet; anything else must be unit-norm.
    """

    id: str
    text: str
    timestamp: str = ""
    session_id: str = ""
    speaker: str = ""
    source: Source = Source.CONSTRUCTION
    embedding: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("entry id must be nonempty")
        if not self.text or not self.text.strip():
            raise ValueError(f"entry {self.id}: text must be nonempty")
        object.__setattr__(self, "source", Source(self.source))
        emb = tuple(float(v) for v in self.embedding)
        if not all(math.isfinite(v) for v in emb):
            raise ValueError(f"entry {self.id}: embedding has non-finite components")
        if emb and not is_zero(emb):
            norm = math.sqrt(math.fsum(v * v for v in emb))
            if abs(norm - 1.0) > NORM_TOLERANCE:
                raise ValueError(f"entry {self.id}: embedding norm {norm!r} is not 1")
        object.__setattr__(self, "embedding", emb)

    @property
    def embedded(self) -> bool:
        return bool(self.embedding) and not is_zero(self.embedding)


class MemoryBank:
    """Insertion-ordered collection of entries with a fixed embedding dimension.

    ``dimension`` may start as ``None``; it is then fixed by the first
    embedding written to the bank.
    """

    def __init__(
        self,
        dimension: int | None = None,
        entries: Sequence[MemoryEntry] = (),
        counter: int = 0,
    ):
        if dimension is not None and dimension <= 0:
            raise ValueError("dimension must be positive")
        self._dimension = dimension
        self._entries: dict[str, MemoryEntry] = {}
        for entry in entries:
            if entry.id in self._entries:
                raise ValueError(f"duplicate entry id {entry.id!r}")
            self._check_dimension(entry.embedding)
            self._entries[entry.id] = entry
        if counter < 0:
            raise ValueError("counter must be nonnegative")
        self._counter = counter
        self._matrix: np.ndarray | None = None

    def _check_dimension(self, embedding: Sequence[float]) -> None:
        if not embedding:
            return
        if self._dimension is None:
            if not is_zero(embedding):
                self._dimension = len(embedding)
            return
        if len(embedding) != self._dimension:
            raise DimensionMismatch(self._dimension, len(embedding))

    @property
    def dimension(self) -> int | None:
        return self._dimension

    @property
    def counter(self) -> int:
        return self._counter

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self._entries.values())

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._entries

    def __getitem__(self, entry_id: str) -> MemoryEntry:
        return self._entries[entry_id]

    @property
    def entries(self) -> list[MemoryEntry]:
        return list(self._entries.values())

    def ids(self) -> list[str]:
        return list(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self._dimension == other._dimension
            and self._counter == other._counter
            and list(self._entries.items()) == list(other._entries.items())
        )

    def __repr__(self) -> str:
        return f"MemoryBank(dimension={self._dimension}, entries={len(self)}, counter={self._counter})"

    def _derive(self, entries: dict[str, MemoryEntry], counter: int | None = None,
                dimension: int | None = None) -> MemoryBank:
        bank = MemoryBank.__new__(MemoryBank)
        bank._dimension = dimension if dimension is not None else self._dimension
        bank._entries = entries
        bank._counter = self._counter if counter is None else counter
        bank._matrix = None
        return bank

    def next_id(self) -> str:
        return f"m{self._counter + 1:0{ID_WIDTH}d}"

    def matrix(self) -> np.ndarray:
        """Embeddings stacked row-wise; unembedded entries are zero rows."""
        if self._matrix is None:
            dim = self._dimension or 0
            mat = np.zeros((len(self._entries), dim), dtype=np.float64)
            for row, entry in enumerate(self._entries.values()):
                if entry.embedding:
                    mat[row] = entry.embedding
            self._matrix = mat
        return self._matrix


@dataclass(frozen=True)
class EditAction:
    """A single atomic memory edit. Field presence must match ``kind``.

    ``timestamp``/``session_id``/``speaker``/``source``/``embedding`` are ADD
    metadata; an ADD without an embedding creates an unembedded entry.
    """

    kind: EditKind
    target_id: str | None = None
    new_text: str | None = None
    timestamp: str | None = None
    session_id: str | None = None
    speaker: str | None = None
    source: Source | None = None
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", EditKind(self.kind))
        except ValueError:
            raise MalformedAction(f"unknown edit kind {self.kind!r}") from None
        kind = self.kind
        needs_target = kind in (EditKind.UPDATE, EditKind.DELETE)
        needs_text = kind in (EditKind.ADD, EditKind.UPDATE)
        if needs_target != (self.target_id is not None):
            raise MalformedAction(f"{kind.value}: target_id {'required' if needs_target else 'forbidden'}")
        if needs_target and not self.target_id:
            raise MalformedAction(f"{kind.value}: empty target_id")
        if needs_text != (self.new_text is not None):
            raise MalformedAction(f"{kind.value}: new_text {'required' if needs_text else 'forbidden'}")
        if needs_text and not self.new_text.strip():
            raise MalformedAction(f"{kind.value}: empty new_text")
        metadata = (self.timestamp, self.session_id, self.speaker, self.source, self.embedding)
        if kind is not EditKind.ADD and any(m is not None for m in metadata):
            raise MalformedAction(f"{kind.value}: metadata is only allowed on ADD")
        if self.embedding is not None:
            object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))

    @classmethod
    def add(cls, text: str, *, timestamp: str = "", session_id: str = "", speaker: str = "",
            source: Source = Source.CONSTRUCTION, embedding: Sequence[float] | None = None) -> EditAction:
        return cls(EditKind.ADD, new_text=text, timestamp=timestamp, session_id=session_id,
                   speaker=speaker, source=Source(source),
                   embedding=None if embedding is None else tuple(embedding))

    @classmethod
    def update(cls, target_id: str, text: str) -> EditAction:
        return cls(EditKind.UPDATE, target_id=target_id, new_text=text)

    @classmethod
    def delete(cls, target_id: str) -> EditAction:
        return cls(EditKind.DELETE, target_id=target_id)

    @classmethod
    def none(cls) -> EditAction:
        return cls(EditKind.NONE)


def apply_edit(bank: MemoryBank, action: EditAction) -> MemoryBank:
    """Return ``bank`` with ``action`` applied. UPDATE leaves the embedding stale."""
    if not isinstance(action, EditAction):
        raise MalformedAction(f"expected EditAction, got {type(action).__name__}")
    kind = action.kind
    if kind is EditKind.NONE:
        return bank
    if kind is EditKind.ADD:
        dimension = bank.dimension
        if action.embedding is not None:
            embedding = action.embedding
            if dimension is None:
                if embedding and not is_zero(embedding):
                    dimension = len(embedding)
            elif embedding and len(embedding) != dimension:
                raise DimensionMismatch(dimension, len(embedding))
        else:
            embedding = (0.0,) * dimension if dimension else ()
        entry = MemoryEntry(
            id=bank.next_id(),
            text=action.new_text,
            timestamp=action.timestamp or "",
            session_id=action.session_id or "",
            speaker=action.speaker or "",
            source=action.source or Source.CONSTRUCTION,
            embedding=embedding,
        )
        entries = dict(bank._entries)
        entries[entry.id] = entry
        return bank._derive(entries, counter=bank.counter + 1, dimension=dimension)
    if action.target_id not in bank:
        raise UnknownTarget(action.target_id)
    entries = dict(bank._entries)
    if kind is EditKind.UPDATE:
        entries[action.target_id] = replace(entries[action.target_id], text=action.new_text)
    else:
        del entries[action.target_id]
    return bank._derive(entries)


def set_embedding(bank: MemoryBank, entry_id: str, embedding: Sequence[float]) -> MemoryBank:
    """Write back a (re-)computed embedding for one entry."""
    if entry_id not in bank:
        raise UnknownTarget(entry_id)
    embedding = tuple(float(v) for v in embedding)
    dimension = bank.dimension
    if dimension is None:
        dimension = len(embedding) if embedding else None
    elif len(embedding) != dimension:
        raise DimensionMismatch(dimension, len(embedding))
    entries = dict(bank._entries)
    entries[entry_id] = replace(entries[entry_id], embedding=embedding)
    return bank._derive(entries, dimension=dimension)


def cosine_scores(bank: MemoryBank, query: Sequence[float]) -> np.ndarray:
    """Cosine similarity of ``query`` against every entry; zero vectors score 0."""
    n = len(bank)
    if n == 0 or bank.dimension is None:
        return np.zeros(n)
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.dimension,):
        raise DimensionMismatch(bank.dimension, int(q.size))
    mat = bank.matrix()
    norms = np.sqrt((mat * mat).sum(axis=1))
    q_norm = math.sqrt(float((q * q).sum()))
    dots = (mat * q).sum(axis=1)
    denom = norms * q_norm
    scores = np.zeros(n)
    ok = denom > 0
    scores[ok] = dots[ok] / denom[ok]
    return scores


def search_top_k(bank: MemoryBank, query_embedding: Sequence[float], k: int) -> list[tuple[MemoryEntry, float]]:
    """Top-``k`` entries by cosine similarity; ties go to the smaller id."""
    if k <= 0:
        raise ValueError("k must be positive")
    if bank.dimension is not None and len(query_embedding) != bank.dimension:
        raise DimensionMismatch(bank.dimension, len(query_embedding))
    if len(bank) == 0:
        return []
    scores = cosine_scores(bank, query_embedding).tolist()
    entries = bank.entries
    best = heapq.nsmallest(k, range(len(entries)), key=lambda i: (-scores[i], entries[i].id))
    return [(entries[i], scores[i]) for i in best]


@dataclass(frozen=True)
class BoundedView:
    entries: tuple[MemoryEntry, ...]
    policy: ViewPolicy
    limit: int

    def __post_init__(self) -> None:
        if self.limit <= 0:
            raise ValueError("limit must be positive")
        if len(self.entries) > self.limit:
            raise ValueError("view holds more entries than its limit")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def bounded_view(bank: MemoryBank, anchor: Sequence[float] | None, policy: ViewPolicy | str,
                 limit: int) -> BoundedView:
    """Size-limited slice of ``bank`` used as prompt context.

    ``hybrid`` without an anchor degrades to ``recent``.
    """
    policy = ViewPolicy(policy)
    if limit <= 0:
        raise ValueError("limit must be positive")
    if policy is ViewPolicy.SEMANTIC and anchor is None:
        raise MissingAnchor("semantic view needs an anchor embedding")
    entries = bank.entries
    if policy is ViewPolicy.RECENT or (policy is ViewPolicy.HYBRID and anchor is None):
        chosen = entries[-limit:]
    elif policy is ViewPolicy.SEMANTIC:
        chosen = [e for e, _ in search_top_k(bank, anchor, limit)]
    else:
        n_recent = -(-limit // 2)
        chosen = list(entries[-n_recent:]) if n_recent else []
        seen = {e.id for e in chosen}
        if limit // 2:
            for entry, _ in search_top_k(bank, anchor, limit // 2):
                if entry.id not in seen:
                    chosen.append(entry)
                    seen.add(entry.id)
    return BoundedView(tuple(chosen), policy, limit)


# persistence

ENTRY_KEYS = ("id", "text", "timestamp", "session_id", "speaker", "source", "embedding")


def _format_float(value: float) -> str:
    return format(value, ".17g")


def _entry_line(entry: MemoryEntry) -> str:
    head = json.dumps({k: getattr(entry, k) if k != "source" else entry.source.value
                       for k in ENTRY_KEYS[:-1]}, ensure_ascii=False)
    vector = "[" + ", ".join(_format_float(v) for v in entry.embedding) + "]"
    return head[:-1] + ', "embedding": ' + vector + "}"


def dumps_bank(bank: MemoryBank) -> str:
    header = {"format": BANK_FORMAT, "version": BANK_VERSION,
              "dimension": bank.dimension, "counter": bank.counter}
    lines = [json.dumps(header)]
    lines.extend(_entry_line(e) for e in bank)
    return "\n".join(lines) + "\n"


def loads_bank(text: str) -> MemoryBank:
    # split on newline only: entry text may hold U+0085/U+2028, which splitlines() would break on
    lines = [line.rstrip("\r") for line in text.split("\n")]
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaViolation("empty bank file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"header is not JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != BANK_FORMAT:
        raise SchemaViolation(f"header must declare format {BANK_FORMAT!r}", 1)
    if header.get("version") != BANK_VERSION:
        raise SchemaViolation(f"unsupported version {header.get('version')!r}", 1)
    dimension = header.get("dimension")
    if dimension is not None and (not isinstance(dimension, int) or dimension <= 0):
        raise SchemaViolation("dimension must be a positive integer", 1)
    entries: list[MemoryEntry] = []
    seen: set[str] = set()
    max_num = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"not JSON ({exc.msg})", lineno) from None
        if not isinstance(record, dict):
            raise SchemaViolation("entry must be a JSON object", lineno)
        missing = [k for k in ENTRY_KEYS if k not in record]
        if missing:
            raise SchemaViolation(f"missing key(s) {', '.join(missing)}", lineno)
        emb = record["embedding"]
        if not isinstance(emb, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in emb):
            raise SchemaViolation("embedding must be an array of numbers", lineno)
        if not all(isinstance(record[k], str) for k in ENTRY_KEYS[:-1]):
            raise SchemaViolation("id/text/timestamp/session_id/speaker/source must be strings", lineno)
        try:
            entry = MemoryEntry(**{k: record[k] for k in ENTRY_KEYS})
        except ValueError as exc:
            raise SchemaViolation(str(exc), lineno) from None
        if entry.id in seen:
            raise SchemaViolation(f"duplicate id {entry.id!r}", lineno)
        if dimension is not None and entry.embedding and len(entry.embedding) != dimension:
            raise SchemaViolation(f"embedding has {len(entry.embedding)} components, expected {dimension}", lineno)
        seen.add(entry.id)
        if entry.id[1:].isdigit():
            max_num = max(max_num, int(entry.id[1:]))
        entries.append(entry)
    counter = header.get("counter", max_num)
    if not isinstance(counter, int) or counter < max_num:
        raise SchemaViolation("counter is smaller than an existing id", 1)
    try:
        return MemoryBank(dimension=dimension, entries=entries, counter=counter)
    except (ValueError, DimensionMismatch) as exc:
        raise SchemaViolation(str(exc)) from None


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_bank(bank), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write bank to {path}: {exc}") from exc


def load_bank(path: str | Path) -> MemoryBank:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read bank from {path}: {exc}") from exc
    return loads_bank(text)


def bank_checksum(bank: MemoryBank) -> str:
    return hashlib.sha256(dumps_bank(bank).encode("utf-8")).hexdigest()
