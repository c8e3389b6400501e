"""Model access: chat completion and embedding behind one small provider surface.

Three adapters share the surface:

* ``CassetteProvider`` replays recorded completions from per-role FIFO queues
  and embeds text either from recorded vectors or with a hashed generator.
* ``LiveProvider`` talks to a chat-completions-style HTTPS API.
* ``RecordingProvider`` wraps any provider and captures a cassette.

Every adapter counts completions per role in ``calls``.
"""
from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .errors import (
    CassetteExhausted,
    IoFailure,
    MissingEmbedding,
    ProviderUnavailable,
    SchemaViolation,
)

log = logging.getLogger(__name__)

CASSETTE_FORMAT = "memcycle-cassette"
CASSETTE_VERSION = 1
API_KEY_ENV = "MEMCYCLE_API_KEY"


class AgentRole(str, Enum):
    META_CONSTRUCTION = "meta_construction"
    MEMORY_MANAGER = "memory_manager"
    META_ANSWERABILITY = "meta_answerability"
    QUERY_REWRITER = "query_rewriter"
    ANSWERER = "answerer"
    PROBE_GENERATOR = "probe_generator"
    JUDGE = "judge"
    REPAIRER = "repairer"
    CONSOLIDATOR = "consolidator"


EVOLUTION_ROLES = (AgentRole.PROBE_GENERATOR, AgentRole.REPAIRER, AgentRole.CONSOLIDATOR)


@dataclass(frozen=True)
class CompletionRequest:
    role: AgentRole
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", AgentRole(self.role))
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


class Provider(Protocol):
    calls: Counter
    temperature: float
    max_tokens: int
    #: True when calls must happen in a reproducible order (cassette replay).
    sequential: bool

    def complete(self, request: CompletionRequest) -> str: ...

    def embed(self, text: str) -> tuple[float, ...]: ...


def complete(provider: Provider, request: CompletionRequest) -> str:
    return provider.complete(request)


def embed(provider: Provider, text: str) -> tuple[float, ...]:
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    return provider.embed(text)


def ask(provider: Provider, role: AgentRole, prompt: str) -> str:
    """One completion for ``role`` using the provider's default sampling settings."""
    request = CompletionRequest(role, prompt, provider.temperature, provider.max_tokens)
    return provider.complete(request)


# hashed embeddings

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def text_digest(text: str) -> str:
    """16-hex-digit FNV-1a digest of the normalized text; keys recorded embeddings."""
    return f"{fnv1a64(normalize_text(text).encode('utf-8')):016x}"


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next() >> 11) * (1.0 / (1 << 53))


def hashed_embedding(text: str, dimension: int, seed: int = 0) -> tuple[float, ...]:
    """Deterministic unit vector for ``text``: Box-Muller normals from SplitMix64 seeded by FNV-1a."""
    if dimension <= 0:
        raise ValueError("dimension must be positive")
    rng = SplitMix64(fnv1a64(normalize_text(text).encode("utf-8")) ^ (seed & MASK64))
    values: list[float] = []
    while len(values) < dimension:
        u1 = 1.0 - rng.uniform()  # (0, 1], keeps log finite
        u2 = rng.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        values.append(radius * math.cos(2.0 * math.pi * u2))
        values.append(radius * math.sin(2.0 * math.pi * u2))
    values = values[:dimension]
    norm = math.sqrt(math.fsum(v * v for v in values))
    if norm == 0.0:
        values = [1.0] + [0.0] * (dimension - 1)
        norm = 1.0
    return tuple(v / norm for v in values)


# cassettes

@dataclass
class Cassette:
    embedding_mode: str = "hashed"
    dimension: int = 64
    completions: dict[str, list[str]] = field(default_factory=dict)
    embeddings: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.embedding_mode not in ("hashed", "recorded"):
            raise SchemaViolation(f"unknown embedding_mode {self.embedding_mode!r}", "embedding_mode")
        if not isinstance(self.dimension, int) or self.dimension <= 0:
            raise SchemaViolation("dimension must be a positive integer", "dimension")
        roles = {r.value for r in AgentRole}
        for role, queue in self.completions.items():
            if role not in roles:
                raise SchemaViolation(f"unknown role {role!r}", f"completions.{role}")
            if not isinstance(queue, list) or not all(isinstance(s, str) for s in queue):
                raise SchemaViolation("queue must be a list of strings", f"completions.{role}")
        for digest, vector in self.embeddings.items():
            if not isinstance(vector, list) or len(vector) != self.dimension:
                raise SchemaViolation(f"vector must have {self.dimension} numbers", f"embeddings.{digest}")

    def to_json(self) -> str:
        doc = {
            "format": CASSETTE_FORMAT,
            "version": CASSETTE_VERSION,
            "embedding_mode": self.embedding_mode,
            "dimension": self.dimension,
            "completions": {role: list(q) for role, q in self.completions.items()},
            "embeddings": self.embeddings,
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Cassette:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"cassette is not JSON ({exc.msg})") from None
        if not isinstance(doc, dict) or doc.get("format") != CASSETTE_FORMAT:
            raise SchemaViolation(f"cassette must declare format {CASSETTE_FORMAT!r}", "format")
        if doc.get("version") != CASSETTE_VERSION:
            raise SchemaViolation(f"unsupported cassette version {doc.get('version')!r}", "version")
        completions = doc.get("completions", {})
        embeddings = doc.get("embeddings", {})
        if not isinstance(completions, dict) or not isinstance(embeddings, dict):
            raise SchemaViolation("completions and embeddings must be objects")
        return cls(doc.get("embedding_mode", "hashed"), doc.get("dimension"), completions, embeddings)

    def save(self, path: str | Path) -> None:
        try:
            Path(path).write_text(self.to_json(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write cassette {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> Cassette:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read cassette {path}: {exc}") from exc
        return cls.from_json(text)


class CassetteProvider:
    """Positional replay: the n-th call for a role gets the n-th recorded response."""

    sequential = True

    def __init__(self, cassette: Cassette, seed: int = 0, temperature: float = 0.0, max_tokens: int = 512):
        self.cassette = cassette
        self.dimension = cassette.dimension
        self.seed = seed
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.calls: Counter = Counter()
        self.embed_calls = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        role = request.role.value
        with self._lock:
            index = self.calls[role]
            queue = self.cassette.completions.get(role, [])
            if index >= len(queue):
                raise CassetteExhausted(role, index)
            self.calls[role] += 1
            return queue[index]

    def embed(self, text: str) -> tuple[float, ...]:
        with self._lock:
            self.embed_calls += 1
        if self.cassette.embedding_mode == "hashed":
            return hashed_embedding(text, self.dimension, self.seed)
        digest = text_digest(text)
        try:
            return tuple(float(v) for v in self.cassette.embeddings[digest])
        except KeyError:
            raise MissingEmbedding(f"no recorded embedding for digest {digest} ({text[:40]!r})") from None

    def remaining(self) -> dict[str, int]:
        return {role: len(q) - self.calls[role] for role, q in self.cassette.completions.items()
                if len(q) - self.calls[role]}


class RecordingProvider:
    """Pass-through wrapper that captures every response into a cassette."""

    def __init__(self, inner: Provider, dimension: int):
        self.inner = inner
        # positional replay needs the recorded per-role order to be reproducible
        self.sequential = True
        self.temperature = inner.temperature
        self.max_tokens = inner.max_tokens
        self.calls: Counter = Counter()
        self.cassette = Cassette("recorded", dimension)
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> str:
        response = self.inner.complete(request)
        with self._lock:
            self.calls[request.role.value] += 1
            self.cassette.completions.setdefault(request.role.value, []).append(response)
        return response

    def embed(self, text: str) -> tuple[float, ...]:
        vector = self.inner.embed(text)
        with self._lock:
            self.cassette.embeddings[text_digest(text)] = list(vector)
        return vector


# live HTTP adapter

RETRY_STATUS = {401, 403, 408, 429}


class _RateLimiter:
    def __init__(self, min_interval: float, clock: Callable[[], float], sleep: Callable[[float], None]):
        self.min_interval = min_interval
        self.clock = clock
        self.sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if self.min_interval <= 0:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.min_interval
        if start > now:
            self.sleep(start - now)


class LiveProvider:
    """Chat-completions and embeddings over HTTPS.

    Transport errors, 5xx, 408/429 and auth failures (401/403) are retried up
    to ``max_attempts`` times with exponential backoff; other client errors
    fail immediately. Malformed model output is never retried here.
    """

    sequential = False

    def __init__(
        self,
        base_url: str,
        models: Mapping[str, str],
        embedding_model: str = "text-embedding-3-small",
        *,
        api_key: str | None = None,
        dimension: int | None = None,
        temperature: float = 0.0,
        max_tokens: int = 512,
        parallelism: int = 4,
        min_interval: float = 0.0,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not api_key:
            raise ProviderUnavailable(f"{API_KEY_ENV} is not set")
        self.base_url = base_url.rstrip("/")
        self.models = dict(models)
        self.embedding_model = embedding_model
        self.dimension = dimension
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.parallelism = parallelism
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep
        self.calls: Counter = Counter()
        self._client = httpx.Client(
            timeout=timeout, transport=transport,
            headers={"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"},
        )
        self._slots = threading.BoundedSemaphore(parallelism)
        self._limiter = _RateLimiter(min_interval, time.monotonic, sleep)
        self._lock = threading.Lock()

    def model_for(self, role: AgentRole) -> str:
        return self.models.get(role.value) or self.models.get("default", "gpt-4o-mini")

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}/{path}"
        last_error = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self._limiter.wait()
            try:
                with self._slots:
                    response = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            status = response.status_code
            if status < 400:
                try:
                    return response.json()
                except ValueError:
                    raise ProviderUnavailable(f"{url}: response body is not JSON") from None
            last_error = f"HTTP {status}"
            if status >= 500 or status in RETRY_STATUS:
                continue
            raise ProviderUnavailable(f"{url}: {last_error}")
        raise ProviderUnavailable(f"{url}: giving up after {self.max_attempts} attempts ({last_error})")

    def complete(self, request: CompletionRequest) -> str:
        body = {
            "model": self.model_for(request.role),
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        payload = self._post("chat/completions", body)
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderUnavailable("completion response lacks choices[0].message.content") from None
        with self._lock:
            self.calls[request.role.value] += 1
        return text or ""

    def embed(self, text: str) -> tuple[float, ...]:
        body: dict = {"model": self.embedding_model, "input": text}
        if self.dimension:
            body["dimensions"] = self.dimension
        payload = self._post("embeddings", body)
        try:
            vector = [float(v) for v in payload["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError):
            raise ProviderUnavailable("embedding response lacks data[0].embedding") from None
        norm = math.sqrt(math.fsum(v * v for v in vector))
        if norm == 0.0:
            return tuple(vector)
        return tuple(v / norm for v in vector)

    def close(self) -> None:
        self._client.close()


def map_in_order(fn: Callable, items: Sequence, provider: Provider) -> list:
    """Apply ``fn`` to ``items``; concurrently for live providers, in order otherwise."""
    if getattr(provider, "sequential", True) or len(items) < 2:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=getattr(provider, "parallelism", 4)) as pool:
        return list(pool.map(fn, items))
