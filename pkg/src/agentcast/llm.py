"""Chat-completion backends.

One protocol (`complete(ChatRequest) -> ChatResponse`) with four
implementations: a live HTTP adapter with retry and rate limiting, a scripted
backend for tests, and a recording/replay pair built on JSONL cassettes keyed
by a stable request fingerprint. Replay is the offline mode the whole test
suite and the deterministic CLI runs sit on.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import requests

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.5


class BackendError(Exception):
    """Base class for chat backend failures."""


class AuthError(BackendError):
    """Credentials rejected. Never retried."""


class RateLimited(BackendError):
    """Provider throttled us and retries were exhausted."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class TransportError(BackendError):
    """Network failure or an HTTP status we do not handle."""


class CassetteError(BackendError):
    """A cassette file could not be read or written."""


class CassetteMiss(BackendError):
    """Replay saw a request the cassette has no (remaining) entry for."""

    def __init__(self, fp: str, request: "ChatRequest"):
        preview = request.messages[-1].content[:80] if request.messages else ""
        super().__init__(f"no cassette entry for fingerprint {fp[:12]}... (last message: {preview!r})")
        self.fingerprint = fp


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int | None = None
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("the first message must come from system or user")
        if self.temperature < 0:
            raise ValueError(f"temperature must be non-negative, got {self.temperature}")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    finish_reason: str = "stop"  # stop | length | other


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def fingerprint(request: ChatRequest) -> str:
    """Stable digest of the semantic request content.

    Covers model, messages, temperature and stop sequences; max_tokens is
    deliberately excluded (it caps output without changing what was asked) and
    is kept only as cassette metadata.
    """
    payload = {
        "model_id": request.model_id,
        "messages": [[m.role, m.content] for m in request.messages],
        "temperature": request.temperature,
        "stop_sequences": list(request.stop_sequences),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --- rate limiting and retry ---------------------------------------------


class RateLimiter:
    """Token bucket shared by every live backend in a process.

    Capacity equals the per-minute budget, so a fresh limiter allows a burst
    of that size before callers start waiting.
    """

    def __init__(
        self,
        requests_per_minute: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self._capacity = float(requests_per_minute)
        self._rate = requests_per_minute / 60.0
        self._tokens = self._capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping until one is available. Returns the wait."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                shortfall = (1.0 - self._tokens) / self._rate
            self._sleep(shortfall)
            waited += shortfall


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for transient failures: 1s, 2s, 4s... capped per
    attempt and in total."""

    max_attempts: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0
    total_delay_ceiling: float = 60.0

    def delay(self, attempt: int, already_slept: float, hint: float | None = None) -> float:
        raw = self.base_delay * (2**attempt) if hint is None else hint
        raw = min(raw, self.max_delay)
        return max(0.0, min(raw, self.total_delay_ceiling - already_slept))


@dataclass(frozen=True)
class Attempt:
    status: int | None
    error: str | None
    slept: float


def _parse_retry_after(headers: dict) -> float | None:
    value = None
    for key, v in headers.items():
        if key.lower() == "retry-after":
            value = v
            break
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except (TypeError, ValueError):
        return None


Transport = Callable[[str, dict, dict, float], tuple[int, dict, Any]]


def _requests_transport(url: str, headers: dict, body: dict, timeout: float) -> tuple[int, dict, Any]:
    try:
        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    try:
        payload = resp.json()
    except ValueError:
        payload = resp.text
    return resp.status_code, dict(resp.headers), payload


class HTTPBackend:
    """Live chat-completions adapter (OpenAI-style wire format).

    401/403 raise AuthError immediately; 429 and 5xx retry with exponential
    backoff, honoring Retry-After when present. The attempt log of the last
    call is kept on `last_attempts` for diagnostics.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        transport: Transport | None = None,
        retry: RetryPolicy = RetryPolicy(),
        rate_limiter: RateLimiter | None = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 120.0,
    ):
        self._url = base_url.rstrip("/") + "/chat/completions"
        self._api_key = api_key
        self._transport = transport or _requests_transport
        self._retry = retry
        self._rate_limiter = rate_limiter
        self._sleep = sleep
        self._timeout = timeout
        self.last_attempts: list[Attempt] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        if request.stop_sequences:
            body["stop"] = list(request.stop_sequences)
        headers = {"Authorization": f"Bearer {self._api_key}"}

        attempts: list[Attempt] = []
        self.last_attempts = attempts
        slept = 0.0
        last_error: BackendError | None = None
        for attempt in range(self._retry.max_attempts):
            if self._rate_limiter is not None:
                self._rate_limiter.acquire()
            hint: float | None = None
            try:
                status, resp_headers, payload = self._transport(self._url, headers, body, self._timeout)
            except TransportError as exc:
                attempts.append(Attempt(status=None, error=str(exc), slept=0.0))
                last_error = exc
            else:
                if status == 200:
                    attempts.append(Attempt(status=200, error=None, slept=0.0))
                    return _parse_chat_payload(payload)
                if status in (401, 403):
                    raise AuthError(f"authentication rejected ({status})")
                if status == 429:
                    hint = _parse_retry_after(resp_headers)
                    attempts.append(Attempt(status=429, error="rate limited", slept=0.0))
                    last_error = RateLimited("rate limited by provider", retry_after=hint)
                elif status >= 500:
                    attempts.append(Attempt(status=status, error="server error", slept=0.0))
                    last_error = TransportError(f"server error ({status})")
                else:
                    raise TransportError(f"unexpected status {status}: {str(payload)[:200]}")
            if attempt + 1 < self._retry.max_attempts:
                delay = self._retry.delay(attempt, slept, hint)
                if delay > 0:
                    self._sleep(delay)
                    slept += delay
                    attempts[-1] = Attempt(attempts[-1].status, attempts[-1].error, delay)
        assert last_error is not None
        raise last_error


def _parse_chat_payload(payload: Any) -> ChatResponse:
    try:
        choice = payload["choices"][0]
        content = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError(f"malformed completion payload: {str(payload)[:200]}") from None
    usage = payload.get("usage") or {}
    reason = choice.get("finish_reason", "stop")
    if reason not in ("stop", "length"):
        reason = "other"
    return ChatResponse(
        content=content or "",
        prompt_tokens=int(usage.get("prompt_tokens", 0)),
        completion_tokens=int(usage.get("completion_tokens", 0)),
        finish_reason=reason,
    )


# --- scripted / recording / replay ----------------------------------------


class ScriptedBackend:
    """Returns queued replies in order; stands in for a live provider.

    Script items may be plain strings, ChatResponse objects, or exceptions
    (raised when reached). Every request is kept on `.requests`.
    """

    def __init__(self, script: Iterable[str | ChatResponse | Exception]):
        self._queue = deque(script)
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if not self._queue:
            raise BackendError(f"script exhausted after {len(self.requests) - 1} replies")
        item = self._queue.popleft()
        if isinstance(item, Exception):
            raise item
        if isinstance(item, str):
            return ChatResponse(content=item)
        return item


def _request_summary(request: ChatRequest) -> dict:
    return {
        "model_id": request.model_id,
        "n_messages": len(request.messages),
        "last_message": request.messages[-1].content[:200],
        "max_tokens": request.max_tokens,
    }


class RecordingBackend:
    """Wraps a live backend and appends every exchange to a cassette file."""

    def __init__(self, inner: Backend, cassette_path: str | Path):
        self._inner = inner
        self._path = Path(cassette_path)
        self._lock = threading.Lock()
        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "a", encoding="utf-8")
        except OSError as exc:
            raise CassetteError(f"cannot open cassette {self._path} for writing: {exc}") from exc

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        entry = {
            "fingerprint": fingerprint(request),
            "request": _request_summary(request),
            "response": {
                "content": response.content,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
                "finish_reason": response.finish_reason,
            },
        }
        line = json.dumps(entry, ensure_ascii=False)
        with self._lock:
            try:
                self._fh.write(line + "\n")
                self._fh.flush()
            except OSError as exc:
                raise CassetteError(f"cannot write cassette {self._path}: {exc}") from exc
        return response

    def close(self) -> None:
        self._fh.close()


def record_mode(backend: Backend, cassette_path: str | Path) -> RecordingBackend:
    return RecordingBackend(backend, cassette_path)


def load_cassette(path: str | Path) -> dict[str, list[ChatResponse]]:
    """Parse a cassette into fingerprint -> ordered responses. Corrupt lines
    raise CassetteError naming the file and line number."""
    path = Path(path)
    entries: dict[str, list[ChatResponse]] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CassetteError(f"cannot open cassette {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                fp = raw["fingerprint"]
                resp = raw["response"]
                response = ChatResponse(
                    content=resp["content"],
                    prompt_tokens=int(resp.get("prompt_tokens", 0)),
                    completion_tokens=int(resp.get("completion_tokens", 0)),
                    finish_reason=resp.get("finish_reason", "stop"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CassetteError(f"{path}:{lineno}: corrupt cassette entry ({exc})") from None
            entries.setdefault(fp, []).append(response)
    return entries


class ReplayBackend:
    """Serves recorded responses by request fingerprint, in recorded order.

    Identical requests (same fingerprint) consume successive entries; a
    request with no remaining entry raises CassetteMiss. Never touches the
    network.
    """

    def __init__(self, entries: dict[str, list[ChatResponse]]):
        self._remaining = {fp: deque(responses) for fp, responses in entries.items()}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        return cls(load_cassette(path))

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = fingerprint(request)
        with self._lock:
            queue = self._remaining.get(fp)
            if not queue:
                raise CassetteMiss(fp, request)
            return queue.popleft()


class UsageMeter:
    """Pass-through wrapper that tallies calls and token usage."""

    def __init__(self, inner: Backend):
        self._inner = inner
        self._lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        with self._lock:
            self.calls += 1
            self.prompt_tokens += response.prompt_tokens
            self.completion_tokens += response.completion_tokens
        return response


# --- leakage probe --------------------------------------------------------


class ProbeResult(Enum):
    LEAKED = "Leaked"
    CUTOFF_RESPECTED = "CutoffRespected"
    INCONCLUSIVE = "Inconclusive"


PROBE_TEMPLATE = "Answer this question without searching the web: {question}"

_CUTOFF_MARKERS = (
    "knowledge cutoff",
    "training cutoff",
    "cutoff date",
    "training data",
    "as of my last update",
    "as of my knowledge",
    "i cannot predict",
    "can't predict",
    "don't have information",
    "do not have information",
    "don't have access to real-time",
    "do not have access to real-time",
    "after my",
)


def leakage_probe(
    backend: Backend,
    question: str,
    answer_patterns: Iterable[str] = (),
    *,
    model_id: str = "default",
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[ProbeResult, str]:
    """Ask the model a post-cutoff question directly and classify the reply.

    A reply containing any answer pattern means the model already knows the
    outcome (Leaked). A reply pointing at its training cutoff means the
    knowledge boundary held (CutoffRespected). Anything else, including an
    empty reply, is Inconclusive. Returns the classification and the raw reply.
    """
    request = ChatRequest(
        model_id=model_id,
        messages=(Message("user", PROBE_TEMPLATE.format(question=question)),),
        temperature=temperature,
    )
    reply = backend.complete(request).content
    lowered = reply.casefold()
    if not lowered.strip():
        return ProbeResult.INCONCLUSIVE, reply
    for pattern in answer_patterns:
        if pattern.casefold() in lowered:
            return ProbeResult.LEAKED, reply
    for marker in _CUTOFF_MARKERS:
        if marker in lowered:
            return ProbeResult.CUTOFF_RESPECTED, reply
    return ProbeResult.INCONCLUSIVE, reply
