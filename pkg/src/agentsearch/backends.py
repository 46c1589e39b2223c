"""Chat-completion and embedding backends.

Two families live here: HTTP clients speaking the OpenAI-compatible wire
protocol (``POST {base}/chat/completions`` and ``POST {base}/embeddings``),
and deterministic in-process stubs so every pipeline runs fully offline.
Clients retry transient failures with jittered exponential backoff and cap
concurrent in-flight requests per endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for backend failures."""


class Timeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class MalformedResponse(BackendError):
    pass


class DimensionMismatch(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class CassetteMiss(BackendError):
    pass


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict


@dataclass(frozen=True)
class ChatMessage:
    """An assistant message: text content plus any structured tool calls."""

    content: str
    tool_calls: tuple[ToolCall, ...] = ()


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    max_output_tokens: int = 4096
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatRequest:
    """Messages plus decoding parameters; mirrors the wire body one-to-one."""

    messages: tuple[dict, ...]
    decoding: Decoding = Decoding()
    tool_schema: tuple[dict, ...] | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].get("role") not in ("system", "user"):
            raise ValueError("first message role must be system or user")


def chat_request(messages: Sequence[dict], decoding: Decoding = Decoding(),
                 tool_schema: Sequence[dict] | None = None) -> ChatRequest:
    return ChatRequest(
        messages=tuple(messages),
        decoding=decoding,
        tool_schema=tuple(tool_schema) if tool_schema is not None else None,
    )


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-length real vector; all values must be finite."""

    values: tuple[float, ...]

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.size == 0 or not np.all(np.isfinite(arr)):
            raise ValueError("embedding values must be a non-empty finite sequence")

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class ChatBackend(Protocol):
    def chat(self, request: ChatRequest) -> ChatMessage: ...


class Embedder(Protocol):
    def embed(self, texts: Sequence[str], instruction: str | None = None) -> list[EmbeddingVector]: ...


@dataclass
class EndpointConfig:
    """Connection and retry policy for one OpenAI-compatible endpoint."""

    base_url: str
    model: str
    api_key: str = ""
    api_key_env: str = ""
    timeout_s: float = 60.0
    max_attempts: int = 4
    backoff_initial_s: float = 0.5
    backoff_jitter: float = 0.25
    max_in_flight: int = 8

    def resolved_key(self) -> str:
        if self.api_key:
            return self.api_key
        if self.api_key_env:
            return os.environ.get(self.api_key_env, "")
        return ""


class Cassette:
    """Request-hash -> response-JSON store for record/replay test fixtures."""

    def __init__(self, path: str | Path, mode: str = "replay"):
        if mode not in ("record", "replay"):
            raise ValueError("cassette mode must be 'record' or 'replay'")
        self.path = Path(path)
        self.mode = mode
        self._entries: dict[str, dict] = {}
        if self.path.exists():
            self._entries = json.loads(self.path.read_text(encoding="utf-8"))

    @staticmethod
    def key(endpoint: str, payload: dict) -> str:
        blob = json.dumps([endpoint, payload], sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def lookup(self, key: str) -> dict | None:
        return self._entries.get(key)

    def store(self, key: str, response: dict) -> None:
        self._entries[key] = response
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self._entries, indent=1, sort_keys=True), encoding="utf-8")


class _HttpBase:
    """Shared POST-with-retry machinery for both endpoint clients."""

    def __init__(self, config: EndpointConfig, cassette: Cassette | None = None,
                 transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep, rng: random.Random | None = None):
        self.config = config
        self.cassette = cassette
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._semaphore = threading.Semaphore(config.max_in_flight)
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport)
        self.last_call_retries = 0

    def _post(self, endpoint: str, payload: dict) -> dict:
        if self.cassette is not None:
            key = Cassette.key(endpoint, payload)
            hit = self.cassette.lookup(key)
            if hit is not None:
                return hit
            if self.cassette.mode == "replay":
                raise CassetteMiss(f"no recorded response for {endpoint} request {key[:12]}")

        url = self.config.base_url.rstrip("/") + endpoint
        headers = {"Content-Type": "application/json"}
        api_key = self.config.resolved_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        self.last_call_retries = 0
        last_error: BackendError | None = None
        for attempt in range(self.config.max_attempts):
            if attempt > 0:
                delay = self.config.backoff_initial_s * (2 ** (attempt - 1))
                delay *= 1.0 + self._rng.uniform(-self.config.backoff_jitter, self.config.backoff_jitter)
                self._sleep(max(delay, 0.0))
                self.last_call_retries += 1
            try:
                with self._semaphore:
                    response = self._client.post(url, json=payload, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = Timeout(f"{url}: {exc}")
                continue
            except httpx.HTTPError as exc:
                last_error = Timeout(f"{url}: {exc}")
                continue
            if response.status_code == 429:
                last_error = RateLimited(f"{url}: HTTP 429")
                continue
            if response.status_code >= 500:
                last_error = Timeout(f"{url}: HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise MalformedResponse(f"{url}: HTTP {response.status_code}: {response.text[:200]}")
            try:
                data = response.json()
            except ValueError as exc:
                raise MalformedResponse(f"{url}: body is not JSON: {exc}") from exc
            if self.cassette is not None and self.cassette.mode == "record":
                self.cassette.store(Cassette.key(endpoint, payload), data)
            return data
        assert last_error is not None
        raise last_error


class OpenAIChatClient(_HttpBase):
    """Chat-completions client. Thread-safe; share one instance per endpoint."""

    def chat(self, request: ChatRequest) -> ChatMessage:
        payload: dict = {
            "model": self.config.model,
            "messages": list(request.messages),
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
        }
        if request.decoding.seed is not None:
            payload["seed"] = request.decoding.seed
        if request.tool_schema is not None:
            payload["tools"] = list(request.tool_schema)
        data = self._post("/chat/completions", payload)
        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat response shape: {exc}") from exc
        tool_calls = []
        for call in message.get("tool_calls") or ():
            try:
                fn = call["function"]
                args = fn.get("arguments", "{}")
                arguments = json.loads(args) if isinstance(args, str) else dict(args)
                tool_calls.append(ToolCall(name=fn["name"], arguments=arguments))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedResponse(f"unparseable tool call: {exc}") from exc
        return ChatMessage(content=message.get("content") or "", tool_calls=tuple(tool_calls))


def _apply_instruction(texts: Sequence[str], instruction: str | None) -> list[str]:
    if instruction is None:
        return list(texts)
    return [f"{instruction}\n{t}" for t in texts]


def _normalize(rows: Sequence[Sequence[float]]) -> list[EmbeddingVector]:
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise DimensionMismatch(f"backend returned inconsistent dims: {sorted(dims)}")
    out = []
    for row in rows:
        arr = np.asarray(row, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not np.isfinite(norm):
            raise MalformedResponse("backend returned a zero or non-finite embedding")
        out.append(EmbeddingVector(tuple(float(x) for x in arr / norm)))
    return out


class OpenAIEmbeddingClient(_HttpBase):
    """Embeddings client; output vectors are L2-normalized on this side."""

    def embed(self, texts: Sequence[str], instruction: str | None = None) -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("texts must be non-empty")
        payload = {"model": self.config.model, "input": _apply_instruction(texts, instruction)}
        data = self._post("/embeddings", payload)
        try:
            items = sorted(data["data"], key=lambda item: item["index"])
            rows = [item["embedding"] for item in items]
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"unexpected embeddings response shape: {exc}") from exc
        if len(rows) != len(texts):
            raise MalformedResponse(f"asked for {len(texts)} embeddings, got {len(rows)}")
        return _normalize(rows)


def stub_embed(text: str, dim: int, seed: int = 0) -> EmbeddingVector:
    """Deterministic pseudo-random unit vector; a pure function of (text, dim, seed)."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    digest = hashlib.sha256(f"{seed}\x1f{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return EmbeddingVector(tuple(float(x) for x in vec))


@dataclass
class StubEmbedder:
    """Offline embedder backed by ``stub_embed``; reentrant and stateless."""

    dim: int = 64
    seed: int = 0

    def embed(self, texts: Sequence[str], instruction: str | None = None) -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("texts must be non-empty")
        return [stub_embed(t, self.dim, self.seed) for t in _apply_instruction(texts, instruction)]


class ScriptedChatBackend:
    """Replays a fixed sequence of assistant messages; raises when exhausted."""

    def __init__(self, messages: Sequence[ChatMessage | str]):
        self._queue = [
            m if isinstance(m, ChatMessage) else ChatMessage(content=m) for m in messages
        ]
        self._pos = 0
        self.requests: list[ChatRequest] = []

    def chat(self, request: ChatRequest) -> ChatMessage:
        self.requests.append(request)
        if self._pos >= len(self._queue):
            raise ScriptExhausted(f"script exhausted after {self._pos} messages")
        msg = self._queue[self._pos]
        self._pos += 1
        return msg


class IdentityRankingBackend:
    """Ranking stub: answers any listwise rerank prompt with the identity order.

    Counts the numbered passage lines (``[i]: ...``) in the last user message
    and echoes ``[1] > [2] > ... > [n]``.
    """

    def chat(self, request: ChatRequest) -> ChatMessage:
        prompt = request.messages[-1]["content"]
        n = 0
        for line in prompt.splitlines():
            if line.startswith(f"[{n + 1}]: "):
                n += 1
        if n == 0:
            raise MalformedResponse("no numbered passages found in rerank prompt")
        return ChatMessage(content=" > ".join(f"[{i}]" for i in range(1, n + 1)))


def scripted_message_from_dict(obj: dict | str) -> ChatMessage:
    """Build a ChatMessage from a script-file entry (plain string or object)."""
    if isinstance(obj, str):
        return ChatMessage(content=obj)
    calls = tuple(
        ToolCall(name=c["name"], arguments=dict(c.get("arguments", {})))
        for c in obj.get("tool_calls", ())
    )
    return ChatMessage(content=obj.get("content", ""), tool_calls=calls)


def load_script_file(path: str | Path) -> dict[str, list[ChatMessage]]:
    """Load a {qa_id: [message, ...]} scripted-agent file."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        qa_id: [scripted_message_from_dict(m) for m in messages]
        for qa_id, messages in raw.items()
    }
