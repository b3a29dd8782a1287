import json
import threading
import time

import httpx
import pytest

from epipolicy.agents import LLMDecider, PolicyAgent, parse_decision
from epipolicy.gateway import (
    GatewayConfig,
    HttpGateway,
    MissingCredentials,
    MockGateway,
    RateLimiter,
    RecordingGateway,
    ReplayGateway,
    ReplayMismatch,
    ScriptExhausted,
    TransportError,
    mock_complete,
    prompt_hash,
)

from test_agents import week6_context


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("EPIPOLICY_TEST_KEY", "sk-secret-value")
    return GatewayConfig(endpoint_url="http://llm.test/v1", api_key_env="EPIPOLICY_TEST_KEY",
                         retry_budget=2, backoff=0.0)


def chat_transport(reply, seen=None, fail_first=0):
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if seen is not None:
            seen.append(request)
        if state["n"] <= fail_first:
            return httpx.Response(503, json={"error": "busy"})
        return httpx.Response(200, json={
            "choices": [{"message": {"role": "assistant", "content": reply}}],
            "usage": {"prompt_tokens": 900, "completion_tokens": 80},
        })

    return httpx.MockTransport(handler)


def test_http_request_shape(api_key, example_response):
    seen = []
    gw = HttpGateway(api_key, transport=chat_transport(example_response, seen))
    assert gw.complete("hello") == example_response
    req = seen[0]
    assert req.url == "http://llm.test/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer sk-secret-value"
    body = json.loads(req.content)
    assert body == {"model": "gpt-5-nano", "messages": [{"role": "user", "content": "hello"}], "temperature": 1.0}
    assert gw.stats[0].prompt_tokens == 900 and gw.stats[0].completion_tokens == 80


def test_http_retries_then_succeeds(api_key):
    gw = HttpGateway(api_key, transport=chat_transport("ok", fail_first=2))
    assert gw.complete("p") == "ok"


def test_http_budget_exhausted(api_key):
    gw = HttpGateway(api_key, transport=chat_transport("ok", fail_first=10))
    with pytest.raises(TransportError):
        gw.complete("p")


def test_unreachable_endpoint_budget_zero(monkeypatch):
    monkeypatch.setenv("EPIPOLICY_TEST_KEY", "k")
    cfg = GatewayConfig(endpoint_url="http://127.0.0.1:9/v1", api_key_env="EPIPOLICY_TEST_KEY",
                        retry_budget=0, timeout=2.0)
    with pytest.raises(TransportError):
        HttpGateway(cfg).complete("p")


def test_malformed_service_reply(api_key):
    transport = httpx.MockTransport(lambda r: httpx.Response(200, json={"choices": []}))
    with pytest.raises(TransportError):
        HttpGateway(api_key, transport=transport).complete("p")


def test_missing_credentials(monkeypatch):
    monkeypatch.delenv("EPIPOLICY_NOPE", raising=False)
    with pytest.raises(MissingCredentials, match="EPIPOLICY_NOPE"):
        HttpGateway(GatewayConfig(api_key_env="EPIPOLICY_NOPE"))


def test_key_never_serialized(api_key):
    assert "sk-secret-value" not in json.dumps(api_key.to_dict())


def test_ensemble_week_makes_independent_requests(api_key, example_response):
    seen = []
    gw = HttpGateway(api_key, transport=chat_transport(example_response, seen))
    agent = PolicyAgent(LLMDecider(gw), ensemble_k=10, max_workers=4)
    decision, prompt, members = agent.decide(week6_context())
    assert len(seen) == 10 and len(members) == 10
    assert all(json.loads(r.content)["messages"][0]["content"] == prompt for r in seen)
    assert decision == parse_decision(example_response)


def test_mock_returns_script_then_exhausts(example_response):
    gw = mock_complete([example_response, "second"])
    assert gw.complete("a") == example_response
    assert gw.complete("b") == "second"
    with pytest.raises(ScriptExhausted):
        gw.complete("c")
    with pytest.raises(ValueError):
        MockGateway([])


def test_mock_from_generator():
    def bodies():
        i = 0
        while True:
            yield str(i)
            i += 1

    gw = MockGateway(bodies)
    assert [gw.complete("p") for _ in range(3)] == ["0", "1", "2"]


def test_record_and_replay(tmp_path):
    path = tmp_path / "t.jsonl"
    rec = RecordingGateway(MockGateway(["r0", "r1"]), path)
    rec.complete("p0", tag={"week": 6, "member": 0, "attempt": 0})
    rec.complete("p1", tag={"week": 6, "member": 1, "attempt": 0})
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert [l["response"] for l in lines] == ["r0", "r1"]
    assert lines[1]["prompt_sha256"] == prompt_hash("p1")

    replay = ReplayGateway(path)
    assert len(replay) == 2
    # Slot lookup is independent of call order.
    assert replay.complete("p1", tag={"week": 6, "member": 1, "attempt": 0}) == "r1"
    assert replay.complete("p0", tag={"week": 6, "member": 0, "attempt": 0}) == "r0"
    with pytest.raises(ReplayMismatch):
        replay.complete("changed", tag={"week": 6, "member": 0, "attempt": 0})
    with pytest.raises(ReplayMismatch):
        replay.complete("p0", tag={"week": 7, "member": 0, "attempt": 0})


def test_rate_limiter_spacing():
    limiter = RateLimiter(50.0)
    start = time.monotonic()
    threads = [threading.Thread(target=limiter.wait) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert time.monotonic() - start >= 5 / 50.0 * 0.9
    RateLimiter(None).wait()
