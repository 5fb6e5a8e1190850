"""Uniform chat-completion interface over a remote hosted model and a
scripted deterministic backend, with retries, timeouts, and transcript
capture.

Every call is single-turn and recorded as one line-delimited transcript
entry (fingerprint, request, response, timing). Credentials never enter
the transcript: auth headers are attached by the transport and are not
part of the recorded request.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

__all__ = [
    "Role",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "FinishReason",
    "fingerprint",
    "ScriptedBackend",
    "RemoteBackend",
    "Gateway",
    "TranscriptWriter",
    "BackendError",
    "RateLimited",
    "Timeout",
    "user_request",
]


class BackendError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class RateLimited(BackendError):
    pass


class Timeout(BackendError):
    pass


class Role(Enum):
    SYSTEM = "system"
    USER = "user"


class FinishReason(Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")


def user_request(model_name: str, content: str, temperature: float = 0.0) -> ChatRequest:
    """The common case: one user message carrying a whole rendered prompt."""
    return ChatRequest(model_name, (ChatMessage(Role.USER, content),), temperature)


@dataclass
class ChatResponse:
    content: str
    finish_reason: FinishReason
    latency_ms: int
    attempt_count: int


def fingerprint(request: ChatRequest) -> str:
    """Stable request hash: equal requests collide, any byte change in any
    field yields a different digest."""
    payload = {
        "model": request.model_name,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "messages": [[m.role.value, m.content] for m in request.messages],
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ScriptedBackend:
    """Deterministic canned-response backend keyed by request fingerprint.

    Unknown fingerprints get default_response, which keeps whole-pipeline
    runs reproducible without any hosted model.
    """

    name = "scripted"

    def __init__(self, script: dict[str, str] | None = None, default_response: str = ""):
        self.script = dict(script or {})
        self.default_response = default_response

    @classmethod
    def from_file(cls, path: str | Path, default_response: str = "") -> "ScriptedBackend":
        script = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                script[record["fingerprint"]] = record["response"]
        return cls(script, default_response)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for fp, response in self.script.items():
                fh.write(json.dumps({"fingerprint": fp, "response": response}, ensure_ascii=False) + "\n")

    def script_response(self, request: ChatRequest, response: str) -> None:
        self.script[fingerprint(request)] = response

    def complete(self, request: ChatRequest) -> ChatResponse:
        content = self.script.get(fingerprint(request), self.default_response)
        return ChatResponse(content, FinishReason.STOP, latency_ms=0, attempt_count=1)


def _requests_chat_transport(
    url: str, payload: dict, headers: dict, timeout: float
) -> tuple[int, dict]:
    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
    body = response.json() if response.content else {}
    return response.status_code, body


class RemoteBackend:
    """HTTPS chat-completion client with bounded retries and exponential
    backoff. Transient statuses (429, 5xx), connection errors, and
    timeouts are retried; other non-200s raise immediately."""

    name = "remote"

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        transport: Callable[[str, dict, dict, float], tuple[int, dict]] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._transport = transport or _requests_chat_transport
        self._sleep = sleep

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": request.model_name,
            "temperature": request.temperature,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens

        url = f"{self.base_url}/chat/completions"
        started = time.perf_counter()
        attempts = 0
        last_failure: BackendError | None = None
        while attempts <= self.max_retries:
            attempts += 1
            try:
                status, body = self._transport(url, payload, self._headers(), self.timeout)
            except requests.Timeout as exc:
                last_failure = Timeout(f"attempt {attempts} timed out: {exc}")
            except requests.RequestException as exc:
                last_failure = BackendError(f"attempt {attempts} failed: {exc}")
            else:
                if status == 200:
                    latency_ms = int((time.perf_counter() - started) * 1000)
                    choice = body["choices"][0]
                    finish = choice.get("finish_reason", "stop")
                    reason = FinishReason.LENGTH if finish == "length" else FinishReason.STOP
                    return ChatResponse(
                        content=choice["message"]["content"],
                        finish_reason=reason,
                        latency_ms=latency_ms,
                        attempt_count=attempts,
                    )
                if status == 429:
                    last_failure = RateLimited(f"rate limited (attempt {attempts})", status)
                elif status >= 500:
                    last_failure = BackendError(f"server error {status} (attempt {attempts})", status)
                else:
                    raise BackendError(f"chat endpoint returned {status}: {body}", status)
            if attempts <= self.max_retries:
                self._sleep(self.backoff * (2 ** (attempts - 1)))
        assert last_failure is not None
        raise last_failure


class TranscriptWriter:
    """Append-only line-delimited transcript sink, serialized across
    threads."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, entry: dict) -> None:
        line = json.dumps(entry, ensure_ascii=False) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)


class Gateway:
    """Front door used by the agents: bounds concurrent remote calls and
    records a transcript entry for every completion (or failure)."""

    def __init__(self, backend, transcript: TranscriptWriter | None = None, max_concurrent: int = 4):
        self.backend = backend
        self.transcript = transcript
        self._semaphore = threading.BoundedSemaphore(max_concurrent)
        self._counter_lock = threading.Lock()
        self.call_count = 0

    def complete(self, request: ChatRequest, tags: dict | None = None) -> ChatResponse:
        with self._counter_lock:
            self.call_count += 1
        with self._semaphore:
            fp = fingerprint(request)
            base = {
                "fingerprint": fp,
                "model": request.model_name,
                "temperature": request.temperature,
                "messages": [[m.role.value, m.content] for m in request.messages],
            }
            if tags:
                base.update(tags)
            try:
                response = self.backend.complete(request)
            except BackendError as exc:
                if self.transcript is not None:
                    entry = dict(base)
                    entry["error"] = str(exc)
                    self.transcript.record(entry)
                raise
            if self.transcript is not None:
                entry = dict(base)
                entry.update(
                    {
                        "response": response.content,
                        "finish_reason": response.finish_reason.value,
                        "latency_ms": response.latency_ms,
                        "attempt_count": response.attempt_count,
                    }
                )
                self.transcript.record(entry)
            return response
