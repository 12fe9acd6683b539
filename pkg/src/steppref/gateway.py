"""Chat-completion gateway shared by every model role.

One abstraction covers the controller (step sampling), the verifier, the
task generator, the file-content generator, and the task filter. Tests and
desk-scale runs use MockChatBackend, which replays scripted texts keyed by
a request digest, a per-role queue, or a handler function; production runs
use HttpChatBackend against any chat-completions compatible endpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import requests

from .records import InvariantViolation, canonical_json

__all__ = [
    "ROLE_TAGS",
    "SPEAKERS",
    "ChatRequest",
    "ChatReply",
    "Sampling",
    "BackendUnavailable",
    "BudgetExceeded",
    "MockExhausted",
    "request_digest",
    "MockChatBackend",
    "HttpChatBackend",
    "ModelGateway",
]

ROLE_TAGS = frozenset({"controller", "verifier", "taskgen", "filegen", "filter"})
SPEAKERS = frozenset({"system", "user", "assistant"})

DEFAULT_RETRY_ATTEMPTS = 3
RETRY_BACKOFF_BASE_S = 0.1


class BackendUnavailable(RuntimeError):
    """Transport-level failure after exhausting any allowed retries."""


class BudgetExceeded(RuntimeError):
    """The configured call budget for a run has been spent."""


class MockExhausted(LookupError):
    """The mock backend has no scripted reply for a request."""


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    max_tokens: int = 1024
    n_samples: int = 1


@dataclass(frozen=True)
class ChatRequest:
    """One chat call: role tag, full message list, sampling, optional seed."""

    role_tag: str
    messages: tuple[tuple[str, str], ...]
    sampling: Sampling = Sampling()
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.role_tag not in ROLE_TAGS:
            raise InvariantViolation(f"unknown role_tag {self.role_tag!r}")
        if not self.messages:
            raise InvariantViolation("request has no messages")
        if self.messages[0][0] != "system":
            raise InvariantViolation("first message must come from the system speaker")
        for speaker, _ in self.messages:
            if speaker not in SPEAKERS:
                raise InvariantViolation(f"unknown speaker {speaker!r}")
        if self.sampling.n_samples < 1:
            raise InvariantViolation("n_samples must be >= 1")
        if self.sampling.n_samples > 1 and self.role_tag != "controller":
            raise InvariantViolation("multi-sample requests are controller-only")
        if self.sampling.temperature < 0:
            raise InvariantViolation("temperature must be >= 0")


@dataclass(frozen=True)
class ChatReply:
    texts: tuple[str, ...]
    usage: dict[str, int] = field(default_factory=dict)
    backend_id: str = ""


def request_digest(request: ChatRequest) -> str:
    """Stable hex digest of everything that determines a mock reply."""
    payload = {
        "role_tag": request.role_tag,
        "messages": [list(m) for m in request.messages],
        "sampling": {
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
            "n_samples": request.sampling.n_samples,
        },
        "seed": request.seed,
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _usage_for(request: ChatRequest, texts: Sequence[str]) -> dict[str, int]:
    prompt_chars = sum(len(t) for _, t in request.messages)
    completion_chars = sum(len(t) for t in texts)
    # Rough 4-chars-per-token accounting, good enough for budget tracking.
    return {
        "prompt_tokens": max(1, prompt_chars // 4),
        "completion_tokens": max(1, completion_chars // 4),
    }


class MockChatBackend:
    """Deterministic scripted backend.

    Reply resolution order per request:
      1. ``fixtures``: digest -> list of texts (must match n_samples),
      2. ``handler``: function of the request returning text(s) or None,
      3. ``queues``: per-role FIFO of texts, popped n_samples at a time.
    ``fail_next`` forces that many transport failures first, for retry tests.
    """

    def __init__(
        self,
        fixtures: Optional[dict[str, Sequence[str]]] = None,
        queues: Optional[dict[str, list[str]]] = None,
        handler: Optional[Callable[[ChatRequest], Any]] = None,
        fail_next: int = 0,
        backend_id: str = "mock",
    ) -> None:
        self.fixtures = dict(fixtures or {})
        self.queues = {role: list(texts) for role, texts in (queues or {}).items()}
        self.handler = handler
        self.fail_next = fail_next
        self.backend_id = backend_id
        self._lock = threading.Lock()

    def _resolve(self, request: ChatRequest) -> list[str]:
        digest = request_digest(request)
        if digest in self.fixtures:
            return list(self.fixtures[digest])
        if self.handler is not None:
            reply = self.handler(request)
            if reply is not None:
                return [reply] if isinstance(reply, str) else list(reply)
        queue = self.queues.get(request.role_tag)
        if queue:
            n = request.sampling.n_samples
            if len(queue) < n:
                raise MockExhausted(
                    f"queue for {request.role_tag!r} has {len(queue)} texts, need {n}"
                )
            texts, queue[:n] = queue[:n], []
            return texts
        raise MockExhausted(
            f"no scripted reply for {request.role_tag!r} request {digest[:12]}"
        )

    def complete(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            if self.fail_next > 0:
                self.fail_next -= 1
                raise BackendUnavailable("mock transport failure (scripted)")
            texts = self._resolve(request)
        want = request.sampling.n_samples
        if len(texts) == 1 and want > 1:
            texts = texts * want
        if len(texts) != want:
            raise MockExhausted(f"fixture yields {len(texts)} texts, request wants {want}")
        return ChatReply(
            texts=tuple(texts),
            usage=_usage_for(request, texts),
            backend_id=self.backend_id,
        )


class HttpChatBackend:
    """Chat-completions HTTP backend (OpenAI-compatible JSON shape)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "",
        timeout_s: float = 60.0,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def complete(self, request: ChatRequest) -> ChatReply:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": s, "content": t} for s, t in request.messages],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
            "n": request.sampling.n_samples,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                data=json.dumps(body),
                headers=headers,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(f"transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailable(f"backend returned HTTP {resp.status_code}")
        payload = resp.json()
        texts = tuple(c["message"]["content"] for c in payload.get("choices", []))
        if len(texts) != request.sampling.n_samples:
            raise BackendUnavailable(
                f"backend returned {len(texts)} choices, wanted {request.sampling.n_samples}"
            )
        usage = payload.get("usage", {})
        return ChatReply(
            texts=texts,
            usage={
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            },
            backend_id=self.model,
        )


class ModelGateway:
    """Routes requests to the backend configured for each role and keeps an
    append-only audit log plus a call budget across the whole run."""

    def __init__(
        self,
        backends: dict[str, Any],
        call_budget: Optional[int] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backends = dict(backends)
        self.call_budget = call_budget
        self.calls_made = 0
        self.audit_log: list[dict[str, Any]] = []
        self._sleep = sleep
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            if self.call_budget is not None and self.calls_made >= self.call_budget:
                raise BudgetExceeded(f"call budget of {self.call_budget} spent")
            self.calls_made += 1
        backend = self.backends.get(request.role_tag)
        if backend is None:
            raise BackendUnavailable(f"no backend configured for role {request.role_tag!r}")
        reply = backend.complete(request)
        if len(reply.texts) != request.sampling.n_samples:
            raise BackendUnavailable(
                f"backend returned {len(reply.texts)} texts, wanted {request.sampling.n_samples}"
            )
        with self._lock:
            self.audit_log.append(
                {
                    "role_tag": request.role_tag,
                    "digest": request_digest(request),
                    "n_samples": request.sampling.n_samples,
                    "backend_id": reply.backend_id,
                }
            )
        return reply

    def with_retry(self, request: ChatRequest, attempts: int = DEFAULT_RETRY_ATTEMPTS) -> ChatReply:
        """complete() with up to ``attempts`` transport tries, backing off
        exponentially between failures."""
        if attempts < 1:
            raise InvariantViolation("attempts must be >= 1")
        last: Optional[BackendUnavailable] = None
        for attempt in range(attempts):
            try:
                return self.complete(request)
            except BackendUnavailable as exc:
                last = exc
                if attempt + 1 < attempts:
                    self._sleep(RETRY_BACKOFF_BASE_S * (2**attempt))
        assert last is not None
        raise last

    def calls_for_role(self, role_tag: str) -> int:
        return sum(1 for entry in self.audit_log if entry["role_tag"] == role_tag)
