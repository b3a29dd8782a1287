"""Transport to an OpenAI-compatible chat-completion service.

Gateways expose ``complete(prompt, tag=None) -> str`` and never look inside
prompts or responses. ``tag`` carries ``{"week", "member", "attempt"}`` so
transcripts can be keyed by decision slot.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import httpx

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://api.openai.com/v1"
DEFAULT_KEY_ENV = "OPENAI_API_KEY"


class TransportError(RuntimeError):
    """The service could not be reached or returned an error."""


class MissingCredentials(RuntimeError):
    pass


class ScriptExhausted(RuntimeError):
    """A mock gateway was asked for more responses than it was given."""


class ReplayMismatch(RuntimeError):
    """A replayed request does not match the recorded transcript."""


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass
class GatewayConfig:
    endpoint_url: str = DEFAULT_ENDPOINT
    model_name: str = "gpt-5-nano"
    api_key_env: str = DEFAULT_KEY_ENV
    timeout: float = 120.0
    retry_budget: int = 3
    temperature: float | None = 1.0
    requests_per_second: float | None = None
    backoff: float = 1.0

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise MissingCredentials(
                f"environment variable {self.api_key_env} is not set; it must hold the API key"
            )
        return key

    def to_dict(self) -> dict:
        # Only the variable name is recorded, never the key itself.
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env": self.api_key_env,
            "timeout": self.timeout,
            "retry_budget": self.retry_budget,
            "temperature": self.temperature,
            "requests_per_second": self.requests_per_second,
            "backoff": self.backoff,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GatewayConfig":
        return cls(**data)


class RateLimiter:
    """Global minimum spacing between requests, shared across threads."""

    def __init__(self, requests_per_second: float | None):
        self.interval = 0.0 if not requests_per_second else 1.0 / requests_per_second
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            time.sleep(slot - now)


@dataclass
class CallStats:
    latency: float
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


class HttpGateway:
    def __init__(self, cfg: GatewayConfig, transport: httpx.BaseTransport | None = None):
        self.cfg = cfg
        self._key = cfg.api_key()
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)
        self._limiter = RateLimiter(cfg.requests_per_second)
        self._lock = threading.Lock()
        self.stats: list[CallStats] = []

    def close(self):
        self._client.close()

    def _request_body(self, prompt: str) -> dict:
        body = {"model": self.cfg.model_name, "messages": [{"role": "user", "content": prompt}]}
        if self.cfg.temperature is not None:
            body["temperature"] = self.cfg.temperature
        return body

    def _once(self, prompt: str) -> str:
        self._limiter.wait()
        url = self.cfg.endpoint_url.rstrip("/") + "/chat/completions"
        start = time.monotonic()
        try:
            resp = self._client.post(
                url,
                json=self._request_body(prompt),
                headers={"Authorization": f"Bearer {self._key}"},
            )
            resp.raise_for_status()
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if not isinstance(text, str):
            raise TransportError("response has no text content")
        usage = data.get("usage") or {}
        with self._lock:
            self.stats.append(CallStats(
                time.monotonic() - start, usage.get("prompt_tokens"), usage.get("completion_tokens"),
            ))
        return text

    def complete(self, prompt: str, tag: dict | None = None) -> str:
        last: TransportError | None = None
        for attempt in range(self.cfg.retry_budget + 1):
            if attempt:
                time.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                return self._once(prompt)
            except TransportError as exc:
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                last = exc
        raise TransportError(f"retry budget exhausted: {last}") from last


class MockGateway:
    """Return canned bodies in order, from a list or a generator."""

    def __init__(self, script: Iterable[str] | Callable[[], Iterator[str]]):
        if callable(script):
            script = script()
        elif isinstance(script, (list, tuple)) and not script:
            raise ValueError("mock script must not be empty")
        self._it = iter(script)
        self._lock = threading.Lock()
        self.prompts: list[str] = []

    def complete(self, prompt: str, tag: dict | None = None) -> str:
        with self._lock:
            self.prompts.append(prompt)
            try:
                return next(self._it)
            except StopIteration:
                raise ScriptExhausted(f"mock script exhausted after {len(self.prompts) - 1} responses") from None


def mock_complete(script) -> MockGateway:
    return MockGateway(script)


def _slot(tag: dict | None, seq: int) -> tuple:
    if tag is None:
        return ("seq", seq)
    return (tag.get("week"), tag.get("member"), tag.get("attempt"))


class RecordingGateway:
    """Wrap a gateway and append every request/response pair to a JSONL file."""

    def __init__(self, inner, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self._lock = threading.Lock()
        self._seq = 0

    def complete(self, prompt: str, tag: dict | None = None) -> str:
        response = self.inner.complete(prompt, tag=tag)
        tag = tag or {}
        with self._lock:
            entry = {
                "seq": self._seq,
                "week": tag.get("week"),
                "member": tag.get("member"),
                "attempt": tag.get("attempt"),
                "prompt_sha256": prompt_hash(prompt),
                "prompt": prompt,
                "response": response,
            }
            self._seq += 1
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return response


class ReplayGateway:
    """Serve responses from a recorded transcript, checking each prompt hash."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[tuple, dict] = {}
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                entry = json.loads(line)
                key = (entry["week"], entry["member"], entry["attempt"])
                if key == (None, None, None):
                    key = ("seq", entry["seq"])
                self._entries[key] = entry
        self._lock = threading.Lock()
        self._seq = 0

    def __len__(self) -> int:
        return len(self._entries)

    def complete(self, prompt: str, tag: dict | None = None) -> str:
        with self._lock:
            key = _slot(tag, self._seq)
            self._seq += 1
        try:
            entry = self._entries[key]
        except KeyError:
            raise ReplayMismatch(f"no recorded response for slot {key} in {self.path}") from None
        if entry["prompt_sha256"] != prompt_hash(prompt):
            raise ReplayMismatch(f"prompt for slot {key} differs from the recording")
        return entry["response"]
