from __future__ import annotations

import json
import math

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import cassette_provider
from memcycle.errors import CassetteExhausted, MissingEmbedding, ProviderUnavailable, SchemaViolation
from memcycle.providers import (
    AgentRole,
    Cassette,
    CassetteProvider,
    CompletionRequest,
    LiveProvider,
    RecordingProvider,
    SplitMix64,
    ask,
    embed,
    fnv1a64,
    hashed_embedding,
    map_in_order,
    text_digest,
)


def oracle_embedding(text: str, dimension: int, seed: int = 0) -> list[float]:
    """Second implementation of the hashed embedding, written from the algorithm description."""
    data = " ".join(text.lower().split()).encode("utf-8")
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2 ** 64
    state = h ^ seed
    out: list[float] = []

    def draw():
        nonlocal state
        state = (state + 0x9E3779B97F4A7C15) % 2 ** 64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2 ** 64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2 ** 64
        return ((z ^ (z >> 31)) >> 11) / 2 ** 53

    while len(out) < dimension:
        u1, u2 = 1 - draw(), draw()
        r = math.sqrt(-2 * math.log(u1))
        out += [r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)]
    out = out[:dimension]
    n = math.sqrt(sum(v * v for v in out))
    return [v / n for v in out]


def test_fnv1a64_published_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_splitmix64_reference_stream():
    rng = SplitMix64(0)
    assert [rng.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert 0.0 <= SplitMix64(1).uniform() < 1.0


GOLDEN_VECTORS = {
    "hello world": (0.014175115735, 0.839762500742, -0.040623729088, 0.242331136316),
    "Ana adopted a beagle": (-0.117871399615, 0.124514037331, -0.290404978642, 0.237440551822),
    "  HELLO   World ": (0.014175115735, 0.839762500742, -0.040623729088, 0.242331136316),
    "Lisbon": (-0.418093389011, -0.291908514081, -0.215645747229, -0.403201261283),
    "x": None,
}


@pytest.mark.parametrize("text", list(GOLDEN_VECTORS))
def test_hashed_embedding_golden_and_oracle(text):
    vec = hashed_embedding(text, 8)
    assert len(vec) == 8
    assert math.isclose(math.fsum(v * v for v in vec), 1.0, abs_tol=1e-12)
    assert vec == pytest.approx(oracle_embedding(text, 8), abs=1e-15)
    if GOLDEN_VECTORS[text] is not None:
        assert vec[:4] == pytest.approx(GOLDEN_VECTORS[text], abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.text(min_size=1), st.integers(1, 33), st.integers(0, 2 ** 64 - 1))
def test_hashed_embedding_matches_oracle(text, dim, seed):
    assert hashed_embedding(text, dim, seed) == pytest.approx(oracle_embedding(text, dim, seed), abs=1e-12)


def test_digest_is_normalization_invariant():
    assert text_digest("Hello  World") == text_digest(" hello world ") == f"{fnv1a64(b'hello world'):016x}"
    assert len(text_digest("anything")) == 16


def test_cassette_replays_positionally_and_exhausts():
    provider = cassette_provider({"judge": ["a", "b"]})
    assert ask(provider, AgentRole.JUDGE, "q") == "a"
    assert ask(provider, AgentRole.JUDGE, "q") == "b"
    with pytest.raises(CassetteExhausted) as info:
        ask(provider, AgentRole.JUDGE, "q")
    assert (info.value.role, info.value.index) == ("judge", 2)
    with pytest.raises(CassetteExhausted):
        ask(provider, AgentRole.ANSWERER, "q")
    assert provider.calls == {"judge": 2}


def test_recorded_embeddings_and_missing_digest():
    cassette = Cassette("recorded", 2, {}, {text_digest("known"): [0.6, 0.8]})
    provider = CassetteProvider(cassette)
    assert embed(provider, "KNOWN") == (0.6, 0.8)
    with pytest.raises(MissingEmbedding):
        embed(provider, "unknown")
    with pytest.raises(ValueError):
        embed(provider, "  ")


def test_cassette_round_trip_and_validation(tmp_path):
    cassette = Cassette("hashed", 4, {"judge": ["x"]})
    path = tmp_path / "c.json"
    cassette.save(path)
    assert Cassette.load(path) == cassette
    with pytest.raises(SchemaViolation):
        Cassette.from_json(json.dumps({"format": "memcycle-cassette", "version": 2}))
    with pytest.raises(SchemaViolation):
        Cassette("hashed", 4, {"oracle": []})
    with pytest.raises(SchemaViolation):
        Cassette("recorded", 3, {}, {"ab": [1.0]})


def test_recording_then_replay_is_identical():
    inner = cassette_provider({"judge": ["one", "two"], "answerer": ["three"]}, dimension=4)
    recorder = RecordingProvider(inner, 4)
    first = [ask(recorder, AgentRole.JUDGE, "p"), ask(recorder, AgentRole.ANSWERER, "p"),
             ask(recorder, AgentRole.JUDGE, "p"), embed(recorder, "hi")]
    replay = CassetteProvider(Cassette.from_json(recorder.cassette.to_json()))
    assert [ask(replay, AgentRole.JUDGE, "p"), ask(replay, AgentRole.ANSWERER, "p"),
            ask(replay, AgentRole.JUDGE, "p"), embed(replay, "hi")] == first


def test_completion_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest(AgentRole.JUDGE, "")
    with pytest.raises(ValueError):
        CompletionRequest("nobody", "p")


def live(handler, **kw):
    sleeps: list[float] = []
    provider = LiveProvider("https://llm.test/v1", {"judge": "judge-model"}, api_key="k",
                            transport=httpx.MockTransport(handler), sleep=sleeps.append, **kw)
    return provider, sleeps


def chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_live_request_shape():
    seen = []

    def handler(request: httpx.Request):
        seen.append((request.url.path, request.headers["authorization"], json.loads(request.content)))
        if request.url.path.endswith("/embeddings"):
            return httpx.Response(200, json={"data": [{"embedding": [3.0, 4.0]}]})
        return chat_reply('{"label": "CORRECT"}')

    provider, _ = live(handler, max_tokens=64)
    assert ask(provider, AgentRole.JUDGE, "prompt") == '{"label": "CORRECT"}'
    assert embed(provider, "text") == pytest.approx((0.6, 0.8))
    path, auth, body = seen[0]
    assert path == "/v1/chat/completions" and auth == "Bearer k"
    assert body == {"model": "judge-model", "messages": [{"role": "user", "content": "prompt"}],
                    "temperature": 0.0, "max_tokens": 64}
    assert seen[1][0] == "/v1/embeddings"
    assert provider.calls == {"judge": 1}


def test_live_retries_transient_failures_with_backoff():
    attempts = []

    def handler(request):
        attempts.append(1)
        if len(attempts) == 1:
            raise httpx.ConnectError("down")
        if len(attempts) == 2:
            return httpx.Response(503)
        return chat_reply("ok")

    provider, sleeps = live(handler)
    assert ask(provider, AgentRole.JUDGE, "p") == "ok"
    assert sleeps == [1.0, 2.0]


def test_live_invalid_credentials_give_up_after_three_attempts():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(401)

    provider, sleeps = live(handler)
    with pytest.raises(ProviderUnavailable):
        ask(provider, AgentRole.JUDGE, "p")
    assert len(attempts) == 3 and sleeps == [1.0, 2.0]


def test_live_client_error_is_not_retried():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(400)

    provider, _ = live(handler)
    with pytest.raises(ProviderUnavailable):
        ask(provider, AgentRole.JUDGE, "p")
    assert len(attempts) == 1


def test_live_needs_credentials(monkeypatch):
    monkeypatch.delenv("MEMCYCLE_API_KEY", raising=False)
    with pytest.raises(ProviderUnavailable):
        LiveProvider("https://llm.test/v1", {})


def test_map_in_order_keeps_order_for_concurrent_providers():
    provider, _ = live(lambda r: chat_reply("x"), parallelism=3)
    assert map_in_order(lambda n: n * n, list(range(20)), provider) == [n * n for n in range(20)]
    assert map_in_order(lambda n: -n, [1, 2], cassette_provider()) == [-1, -2]

