"""Chat-protocol client for external LLM backends, system-prompt
construction from the dimension dictionary, and deterministic mock backends
for tests and offline runs."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field

import requests

from .dictionary import DIRECTION_PHRASES, VARIABLE_LABELS, DimensionEntry

GROUNDING_INSTRUCTION = (
    "Always reference actual retrieved data: cite the environmental variable "
    "values and embedding dimension signals provided in the context, and do "
    "not invent numbers."
)


class LlmError(RuntimeError):
    """Base class for chat-backend failures."""


class AuthError(LlmError):
    """Authentication or authorization was rejected."""


class TransportError(LlmError):
    """Transport failure or server errors persisting past all retries."""


class MalformedResponseError(LlmError):
    """The server replied, but not with a parseable completion."""


class ApiError(LlmError):
    """Non-retryable client-side API rejection (4xx other than auth)."""


class ScriptExhaustedError(LlmError):
    """A fixed-script mock ran out of canned responses."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"role must be 'system' or 'user', got {self.role!r}")
        if not self.content:
            raise ValueError("message content must be nonempty")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.2

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role != "system":
            raise ValueError("first message must have the system role")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    token_env: str = "TERRALENS_API_TOKEN"
    timeout_s: float = 30.0
    retries: int = 2
    max_concurrency: int = 4

    def __post_init__(self) -> None:
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


def request_body(request: ChatRequest) -> bytes:
    """Byte-stable JSON body: key order is fixed (model, messages,
    temperature)."""
    payload = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
    }
    return json.dumps(payload, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def build_system_prompt(entries: tuple[DimensionEntry, ...]) -> str:
    """System prompt enumerating all interpretable dimension relationships
    in arrow format, plus the data-grounding instruction. Deterministic for
    a fixed dictionary."""
    lines = [
        "You are a land surface intelligence assistant. You answer natural "
        "language questions about locations using a 64-dimensional satellite "
        "embedding, retrieved environmental variables, and similar-location "
        "search results.",
    ]
    rel = []
    for e in entries:
        if not e.interpretable or e.spearman_variable is None:
            continue
        label = VARIABLE_LABELS.get(e.spearman_variable, e.spearman_variable)
        high, low = DIRECTION_PHRASES[e.category]
        phrase = high if e.positive else low
        rel.append(f"{e.dim_name} → {label} (ρ = {e.spearman_rho:+.2f}): "
                   f"Higher values indicate {phrase}")
    if rel:
        lines.append("Validated dimension-variable relationships:")
        lines.extend(rel)
    lines.append(GROUNDING_INSTRUCTION)
    return "\n".join(lines)


def _parse_completion(data) -> str:
    try:
        choices = data["choices"]
        content = choices[0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"completion payload missing choices/message/content: {exc}") from None
    if not isinstance(content, str):
        raise MalformedResponseError(f"completion content is {type(content).__name__}, expected str")
    return content


def chat_complete(config: BackendConfig, request: ChatRequest,
                  session: requests.Session | None = None) -> tuple[str, int]:
    """POST the chat request; returns (assistant text, retries used).

    Retries with exponential backoff on transport failures and 5xx statuses.
    Auth rejections (401/403) raise AuthError immediately; other 4xx raise
    ApiError; unparseable success bodies raise MalformedResponseError.
    """
    url = config.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.token_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = request_body(request)
    sess = session or requests

    last_exc: Exception | None = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(min(2.0, 0.2 * (2 ** (attempt - 1))))
        try:
            resp = sess.post(url, data=body, headers=headers, timeout=config.timeout_s)
        except requests.RequestException as exc:
            last_exc = exc
            continue
        if resp.status_code in (401, 403):
            raise AuthError(f"auth rejected with status {resp.status_code}")
        if resp.status_code >= 500:
            last_exc = TransportError(f"server error {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise ApiError(f"request rejected with status {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"response body is not JSON: {exc}") from None
        return _parse_completion(data), attempt
    raise TransportError(f"request failed after {config.retries + 1} attempts: {last_exc}")


class HttpBackend:
    """Shareable HTTP chat backend; concurrent in-flight requests are capped
    at config.max_concurrency."""

    def __init__(self, config: BackendConfig, name: str = "http") -> None:
        self.config = config
        self.name = name
        self.last_retries = 0
        self._sem = threading.Semaphore(config.max_concurrency)
        self._session = requests.Session()

    def complete(self, request: ChatRequest) -> str:
        with self._sem:
            text, retries = chat_complete(self.config, request, session=self._session)
        self.last_retries = retries
        return text


def _digest(request: ChatRequest) -> str:
    return hashlib.sha256(request_body(request)).hexdigest()


@dataclass
class MockBackend:
    """Deterministic offline backend.

    Behaviors: echo-hash derives a sentence from the request digest;
    fixed-script replays canned responses in order (then raises);
    scored-json emits a valid judge-score object with digest-derived scores.
    """

    behavior: str
    name: str = "mock"
    script: tuple[str, ...] = ()
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self) -> None:
        if self.behavior not in ("echo-hash", "fixed-script", "scored-json"):
            raise ValueError(f"unknown mock behavior {self.behavior!r}")

    def complete(self, request: ChatRequest) -> str:
        if self.behavior == "echo-hash":
            digest = _digest(request)[:16]
            chars = sum(len(m.content) for m in request.messages)
            return (f"[{self.name}:echo:{digest}] deterministic response to "
                    f"{len(request.messages)} messages totaling {chars} characters.")
        if self.behavior == "fixed-script":
            if self._cursor >= len(self.script):
                raise ScriptExhaustedError(f"script exhausted after {len(self.script)} responses")
            text = self.script[self._cursor]
            self._cursor += 1
            return text
        # scored-json
        raw = hashlib.sha256(request_body(request)).digest()
        keys = ("grounding", "accuracy", "completeness", "coherence", "utility")
        scores = {k: 1 + raw[i] % 5 for i, k in enumerate(keys)}
        scores["reasoning"] = f"deterministic mock judgment {raw.hex()[:8]}"
        return json.dumps(scores, separators=(", ", ": "))


def mock_backend(behavior: str, script: tuple[str, ...] | list[str] = (), name: str = "mock") -> MockBackend:
    return MockBackend(behavior=behavior, name=name, script=tuple(script))
