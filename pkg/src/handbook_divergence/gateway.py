"""Client contracts for chat-completion, embedding, and relevance-scoring endpoints.

The :class:`Gateway` wraps a backend (HTTP or in-process mock) with a
disk cache, retries with exponential backoff, an in-flight cap, and call
accounting. HTTP backends speak the common ``/chat/completions``,
``/embeddings`` and ``/rerank`` JSON shapes.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from ._io import atomic_write_text, canonical_json, sha256_hex

logger = logging.getLogger(__name__)

ENV_PREFIX = "HBDIV_"


class GatewayError(RuntimeError):
    """Transport failure that persisted through every retry."""

    def __init__(self, kind: str, digest: str, cause: Exception | None = None) -> None:
        self.kind = kind
        self.digest = digest
        self.cause = cause
        super().__init__(f"{kind} request {digest[:12]} failed: {cause}")


class MalformedResponse(ValueError):
    """Endpoint answered, but not in the required shape (after the allowed retry)."""


class DimensionError(ValueError):
    pass


class BackendError(RuntimeError):
    """Raised by backends for transient transport problems; triggers a retry."""


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    response_format: str = "free_text"

    def __post_init__(self) -> None:
        if self.response_format not in ("free_text", "json_object"):
            raise ValueError(f"unknown response_format {self.response_format!r}")

    def body(self, model: str) -> dict:
        body = {
            "model": model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": self.user_prompt},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        }
        if self.response_format == "json_object":
            body["response_format"] = {"type": "json_object"}
        return body


@dataclass(frozen=True)
class ModelConfig:
    base_url: str = "http://localhost:8000/v1"
    api_key_env: str = ENV_PREFIX + "API_KEY"
    chat_model: str = "Qwen/Qwen3-14B"
    embed_model: str = "BAAI/bge-large-en-v1.5"
    rerank_model: str = "cross-encoder/ms-marco-MiniLM-L-6-v2"
    rerank_mode: str = "api"  # "api" (dedicated /rerank) or "chat" (scoring prompt)
    timeout: float = 120.0

    @classmethod
    def from_env(cls, base: "ModelConfig | None" = None) -> "ModelConfig":
        base = base or cls()
        overrides = {}
        for name in ("base_url", "chat_model", "embed_model", "rerank_model", "rerank_mode"):
            value = os.environ.get(ENV_PREFIX + name.upper())
            if value:
                overrides[name] = value
        return cls(**{**asdict(base), **overrides})


@dataclass
class EndpointStats:
    requests: int = 0     # logical requests made to the gateway
    calls: int = 0        # attempts that reached the backend
    cache_hits: int = 0
    retries: int = 0
    failures: int = 0


@dataclass
class GatewayStats:
    chat: EndpointStats = field(default_factory=EndpointStats)
    embed: EndpointStats = field(default_factory=EndpointStats)
    rerank: EndpointStats = field(default_factory=EndpointStats)
    network_calls: int = 0
    peak_in_flight: int = 0

    def total_calls(self) -> int:
        return self.chat.calls + self.embed.calls + self.rerank.calls

    def to_json(self) -> dict:
        return asdict(self)


class Backend(Protocol):
    remote: bool

    def chat(self, body: dict) -> str: ...

    def embed(self, body: dict) -> list[list[float]]: ...

    def rerank(self, body: dict) -> list[float]: ...


class HttpBackend:
    """Backend for any server exposing the usual chat/embeddings/rerank JSON endpoints."""

    remote = True

    def __init__(self, cfg: ModelConfig, client=None) -> None:
        import httpx

        self.cfg = cfg
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._httpx = httpx
        self.client = client or httpx.Client(base_url=cfg.base_url.rstrip("/") + "/",
                                             headers=headers, timeout=cfg.timeout)

    def _post(self, path: str, body: dict) -> dict:
        try:
            resp = self.client.post(path, json=body)
        except self._httpx.HTTPError as exc:
            raise BackendError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise MalformedResponse(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def chat(self, body: dict) -> str:
        data = self._post("chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat response shape: {exc}") from exc

    def embed(self, body: dict) -> list[list[float]]:
        data = self._post("embeddings", body)
        try:
            rows = sorted(data["data"], key=lambda r: r["index"])
            return [r["embedding"] for r in rows]
        except (KeyError, TypeError) as exc:
            raise MalformedResponse(f"unexpected embeddings response shape: {exc}") from exc

    def rerank(self, body: dict) -> list[float]:
        data = self._post("rerank", body)
        try:
            scores = [0.0] * len(body["documents"])
            for r in data["results"]:
                scores[r["index"]] = float(r.get("relevance_score", r.get("score")))
            return scores
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise MalformedResponse(f"unexpected rerank response shape: {exc}") from exc


class MockBackend:
    """In-process backend built from plain callables. Makes no network calls."""

    remote = False

    def __init__(self, chat_fn: Callable[[str, str], str] | None = None,
                 embed_fn: Callable[[str], list[float]] | None = None,
                 score_fn: Callable[[str, str], float] | None = None) -> None:
        self.chat_fn = chat_fn or (lambda system, user: "")
        self.embed_fn = embed_fn or hash_embedding
        self.score_fn = score_fn or overlap_score

    def chat(self, body: dict) -> str:
        msgs = {m["role"]: m["content"] for m in body["messages"]}
        return self.chat_fn(msgs.get("system", ""), msgs.get("user", ""))

    def embed(self, body: dict) -> list[list[float]]:
        return [list(self.embed_fn(t)) for t in body["input"]]

    def rerank(self, body: dict) -> list[float]:
        return [float(self.score_fn(body["query"], d)) for d in body["documents"]]


_WORD_RE = re.compile(r"\w+")


def hash_embedding(text: str, dim: int = 64) -> list[float]:
    """Deterministic feature-hashed bag-of-words vector (not normalized)."""
    vec = [0.0] * dim
    for tok in _WORD_RE.findall(text.lower()):
        h = int(sha256_hex(tok)[:8], 16)
        vec[h % dim] += 1.0 if (h >> 8) & 1 else -1.0
    if not any(vec):
        vec[0] = 1.0
    return vec


def overlap_score(query: str, passage: str) -> float:
    q = set(_WORD_RE.findall(query.lower()))
    return float(len(q & set(_WORD_RE.findall(passage.lower()))))


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)\s*```", re.DOTALL)


def extract_json_text(text: str) -> str:
    """Strip markdown fences; return text that ``json.loads`` accepts or raise ValueError."""
    m = _FENCE_RE.search(text)
    candidate = m.group(1) if m else text.strip()
    json.loads(candidate)
    return candidate


_RERANK_SYSTEM = ("You rate how relevant a passage is to a question. "
                  'Reply with JSON {"score": <number from 0 to 10>} and nothing else.')


class Gateway:
    """Shared, thread-safe front door to the model endpoints."""

    def __init__(self, backend: Backend, models: ModelConfig | None = None, *,
                 cache_dir: Path | str | None = None, max_attempts: int = 3,
                 backoff_base: float = 0.5, max_in_flight: int = 4,
                 embed_batch_size: int = 32, sleep: Callable[[float], None] = time.sleep) -> None:
        self.backend = backend
        self.models = models or ModelConfig()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.max_attempts = max(1, max_attempts)
        self.backoff_base = backoff_base
        self.embed_batch_size = embed_batch_size
        self.stats = GatewayStats()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._in_flight = 0
        self._dim: int | None = None

    # -- plumbing -------------------------------------------------------------

    def _bump(self, kind: str, name: str, n: int = 1) -> None:
        with self._lock:
            ep = getattr(self.stats, kind)
            setattr(ep, name, getattr(ep, name) + n)

    def _cache_path(self, kind: str, key: str) -> Path | None:
        return self.cache_dir / kind / f"{key}.json" if self.cache_dir else None

    def _cache_get(self, kind: str, key: str):
        path = self._cache_path(kind, key)
        if path is None or not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            value = json.load(fh)["response"]
        self._bump(kind, "cache_hits")
        return value

    def _cache_put(self, kind: str, key: str, value) -> None:
        path = self._cache_path(kind, key)
        if path is not None:
            atomic_write_text(path, json.dumps({"response": value}, ensure_ascii=False))

    def _invoke(self, kind: str, fn: Callable[[dict], object], body: dict, digest: str):
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._bump(kind, "retries")
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            with self._slots:
                with self._lock:
                    self._in_flight += 1
                    self.stats.peak_in_flight = max(self.stats.peak_in_flight, self._in_flight)
                    if self.backend.remote:
                        self.stats.network_calls += 1
                try:
                    self._bump(kind, "calls")
                    return fn(body)
                except (BackendError, TimeoutError, ConnectionError) as exc:
                    last = exc
                    logger.warning("%s attempt %d/%d failed: %s", kind, attempt + 1, self.max_attempts, exc)
                finally:
                    with self._lock:
                        self._in_flight -= 1
        self._bump(kind, "failures")
        raise GatewayError(kind, digest, last)

    # -- public API -------------------------------------------------------------

    def chat(self, req: ChatRequest) -> str:
        """Return the model's text. In ``json_object`` mode the text is valid JSON.

        A response that does not parse as JSON is retried once; a second bad
        response raises :class:`MalformedResponse`.
        """
        body = req.body(self.models.chat_model)
        key = sha256_hex(canonical_json({"kind": "chat", "model": self.models.chat_model, "body": body}))
        self._bump("chat", "requests")
        cached = self._cache_get("chat", key)
        if cached is not None:
            return cached
        text = self._invoke("chat", self.backend.chat, body, key)
        if req.response_format == "json_object":
            try:
                text = extract_json_text(text)
            except ValueError:
                self._bump("chat", "retries")
                text = self._invoke("chat", self.backend.chat, body, key)
                try:
                    text = extract_json_text(text)
                except ValueError as exc:
                    self._bump("chat", "failures")
                    raise MalformedResponse(f"chat request {key[:12]}: invalid JSON after retry") from exc
        self._cache_put("chat", key, text)
        return text

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        """Embed ``texts`` in batches; every returned vector has unit L2 norm."""
        if not texts:
            raise ValueError("embed() requires at least one text")
        model = self.models.embed_model
        self._bump("embed", "requests")
        keys = [sha256_hex(canonical_json({"kind": "embed", "model": model, "input": t})) for t in texts]
        out: list[list[float] | None] = [self._cache_get("embed", k) for k in keys]
        todo = [i for i, v in enumerate(out) if v is None]
        for start in range(0, len(todo), self.embed_batch_size):
            idx = todo[start:start + self.embed_batch_size]
            body = {"model": model, "input": [texts[i] for i in idx]}
            digest = sha256_hex(canonical_json(body))
            vectors = self._invoke("embed", self.backend.embed, body, digest)
            if len(vectors) != len(idx):
                self._bump("embed", "failures")
                raise MalformedResponse(f"expected {len(idx)} embeddings, got {len(vectors)}")
            for i, v in zip(idx, vectors):
                out[i] = list(map(float, v))
                self._cache_put("embed", keys[i], out[i])
        return [self._normalize(v) for v in out]

    def _normalize(self, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        with self._lock:
            if self._dim is None:
                self._dim = arr.shape[0]
            elif arr.shape[0] != self._dim:
                raise DimensionError(f"embedding dimension changed from {self._dim} to {arr.shape[0]}")
        norm = float(np.linalg.norm(arr))
        if not math.isfinite(norm) or norm == 0.0:
            raise MalformedResponse("embedding has zero or non-finite norm")
        return arr / norm

    def score_pairs(self, question: str, passages: list[str]) -> list[float]:
        """Relevance score per passage (higher is more relevant)."""
        if not passages:
            raise ValueError("score_pairs() requires at least one passage")
        if self.models.rerank_mode == "chat":
            return [self._score_by_chat(question, p) for p in passages]
        body = {"model": self.models.rerank_model, "query": question, "documents": list(passages)}
        key = sha256_hex(canonical_json({"kind": "rerank", "body": body}))
        self._bump("rerank", "requests")
        cached = self._cache_get("rerank", key)
        if cached is None:
            cached = self._invoke("rerank", self.backend.rerank, body, key)
            if len(cached) != len(passages):
                self._bump("rerank", "failures")
                raise MalformedResponse(f"expected {len(passages)} scores, got {len(cached)}")
            cached = [float(s) for s in cached]
            self._cache_put("rerank", key, cached)
        return list(cached)

    def _score_by_chat(self, question: str, passage: str) -> float:
        req = ChatRequest(
            system_prompt=_RERANK_SYSTEM,
            user_prompt=f"<question>{question}</question>\n<passage>{passage}</passage>",
            max_output_tokens=16,
            response_format="json_object",
        )
        try:
            return float(json.loads(self.chat(req))["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad relevance score: {exc}") from exc


def make_gateway(models: ModelConfig, *, mock: bool = False, cache_dir=None,
                 max_in_flight: int = 4, chat_fn=None) -> Gateway:
    if mock:
        from .mocks import mock_chat

        return Gateway(MockBackend(chat_fn=chat_fn or mock_chat), models,
                       cache_dir=cache_dir, max_in_flight=max_in_flight, backoff_base=0.0)
    return Gateway(HttpBackend(models), models, cache_dir=cache_dir, max_in_flight=max_in_flight)
