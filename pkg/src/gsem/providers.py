"""Model access: chat and embedding providers.

Everything upstream talks to two small protocols, ``ChatProvider`` and
``EmbeddingProvider``. ``OpenAIChat``/``OpenAIEmbeddings`` speak the
OpenAI-compatible HTTP API; ``ScriptedChat`` and ``HashEmbedder`` are
deterministic offline stand-ins used by tests and fixtures.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, Union, runtime_checkable

import httpx
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "GSEM_API_KEY"


class ProviderError(Exception):
    """A model call failed after all retries."""


class UnmatchedRequest(LookupError):
    """A scripted provider received a request it has no reply for.

    Deliberately not a ProviderError so fallbacks never mask it.
    """


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str = ""
    temperature: float = 0.0
    sample_seed: int | None = None
    max_reply_tokens: int | None = None

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("chat request needs a non-empty user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict[str, int] | None = None


@runtime_checkable
class ChatProvider(Protocol):
    def chat(self, req: ChatRequest) -> ChatResponse: ...


@runtime_checkable
class EmbeddingProvider(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def unit_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ProviderError("cannot normalize a zero embedding")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# --- mocks ----------------------------------------------------------------

Reply = Union[str, Sequence[str], Callable[[ChatRequest], str]]


class ScriptedChat:
    """Replays canned replies chosen by substring match on the user text.

    ``script`` is an ordered list of ``(matcher, reply)``. A matcher is a
    string or a list of strings that must all occur in the user text; the
    first matching entry wins. A reply is a string, a callable taking the
    request, or a list of strings consumed one per call.
    """

    def __init__(self, script: Sequence[tuple[str | Sequence[str], Reply]]) -> None:
        self._script = []
        for matcher, reply in script:
            needles = (matcher,) if isinstance(matcher, str) else tuple(matcher)
            if isinstance(reply, (list, tuple)):
                reply = list(reply)
            self._script.append((needles, reply))
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    def chat(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.requests.append(req)
            for needles, reply in self._script:
                if all(n in req.user for n in needles):
                    if callable(reply):
                        return ChatResponse(reply(req))
                    if isinstance(reply, list):
                        if not reply:
                            raise UnmatchedRequest(f"reply queue for {needles!r} exhausted")
                        return ChatResponse(reply.pop(0))
                    return ChatResponse(reply)
        raise UnmatchedRequest(f"no scripted reply matches request: {req.user[:300]!r}")

    @classmethod
    def from_json(cls, items: list[dict]) -> ScriptedChat:
        return cls([(it["match"], it["reply"]) for it in items])


class FailingChat:
    """Always raises; for exercising error paths."""

    def __init__(self, exc: Exception | None = None) -> None:
        self.exc = exc or ProviderError("provider unavailable")
        self.calls = 0

    def chat(self, req: ChatRequest) -> ChatResponse:
        self.calls += 1
        raise self.exc


HASH_DIM = 64


def _normalize_for_hash(text: str) -> str:
    return " ".join(text.lower().split())


def _bucket(gram: str, dim: int) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def mock_embed_hash(text: str, dim: int = HASH_DIM) -> np.ndarray:
    """Character-trigram hashing embedding.

    Lowercased, whitespace-collapsed text; each trigram increments bucket
    ``blake2b(trigram) mod dim``. Texts shorter than three characters hash as
    a single gram; empty text maps to the basis vector at index 0.
    """
    t = _normalize_for_hash(text)
    v = np.zeros(dim, dtype=np.float64)
    if not t:
        v[0] = 1.0
        return v
    grams = [t[i : i + 3] for i in range(len(t) - 2)] or [t]
    for g in grams:
        v[_bucket(g, dim)] += 1.0
    return v / float(np.linalg.norm(v))


class HashEmbedder:
    def __init__(self, dim: int = HASH_DIM) -> None:
        self.dim = dim
        self.calls = 0

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        self.calls += 1
        return [mock_embed_hash(t, self.dim) for t in texts]


class TableEmbedder:
    """Returns fixed vectors from a lookup table, falling back to hashing."""

    def __init__(self, table: dict[str, Sequence[float]], dim: int = HASH_DIM) -> None:
        self.table = {k: unit_normalize(np.asarray(v, dtype=np.float64)) for k, v in table.items()}
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        return [self.table[t] if t in self.table else mock_embed_hash(t, self.dim) for t in texts]


# --- HTTP -----------------------------------------------------------------


@dataclass
class ProviderConfig:
    endpoint_url: str
    model_name: str
    api_key_env_var: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    retry_count: int = 2
    backoff_base: float = 0.5
    requests_per_second: float | None = None
    extra_headers: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.retry_count < 0:
            raise ValueError("retry_count must be >= 0")


class RateLimiter:
    """Token bucket with capacity 1; ``rate`` requests per second."""

    def __init__(self, rate: float | None, clock=time.monotonic, sleep=time.sleep) -> None:
        self.rate = rate
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.rate:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + 1.0 / self.rate
        if wait > 0:
            self._sleep(wait)


class _HttpBase:
    def __init__(self, cfg: ProviderConfig, transport: httpx.BaseTransport | None = None) -> None:
        self.cfg = cfg
        self._client = httpx.Client(
            base_url=cfg.endpoint_url.rstrip("/"), timeout=cfg.timeout, transport=transport
        )
        self._limiter = RateLimiter(cfg.requests_per_second)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json", **self.cfg.extra_headers}
        key = os.environ.get(self.cfg.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        attempts = self.cfg.retry_count + 1
        last: str = ""
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.cfg.backoff_base * 2 ** (attempt - 1))
            self._limiter.acquire()
            try:
                resp = self._client.post(path, json=body, headers=self._headers())
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
                log.warning("POST %s attempt %d/%d timed out", path, attempt + 1, attempts)
                continue
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                log.warning("POST %s attempt %d/%d failed: %s", path, attempt + 1, attempts, exc)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}: {resp.text[:500]}"
                log.warning("POST %s attempt %d/%d got %d", path, attempt + 1, attempts, resp.status_code)
                continue
            if resp.status_code >= 300:
                raise ProviderError(f"HTTP {resp.status_code} from {path}: {resp.text[:2000]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"non-JSON body from {path}: {exc}") from None
        raise ProviderError(f"POST {path} failed after {attempts} attempts; last error {last}")

    def close(self) -> None:
        self._client.close()


class OpenAIChat(_HttpBase):
    def chat(self, req: ChatRequest) -> ChatResponse:
        messages = []
        if req.system:
            messages.append({"role": "system", "content": req.system})
        messages.append({"role": "user", "content": req.user})
        body: dict = {"model": self.cfg.model_name, "messages": messages, "temperature": req.temperature}
        if req.sample_seed is not None:
            body["seed"] = req.sample_seed
        if req.max_reply_tokens is not None:
            body["max_tokens"] = req.max_reply_tokens
        data = self._post("/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderError(f"malformed chat completion: {str(data)[:500]}") from None
        return ChatResponse(text or "", data.get("usage"))


class OpenAIEmbeddings(_HttpBase):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        data = self._post("/embeddings", {"model": self.cfg.model_name, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d.get("index", 0))
            vecs = [unit_normalize(np.asarray(d["embedding"], dtype=np.float64)) for d in items]
        except (KeyError, TypeError):
            raise ProviderError(f"malformed embeddings response: {str(data)[:500]}") from None
        if len(vecs) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(vecs)}")
        return vecs


def chat_with_retry(provider: ChatProvider, req: ChatRequest, retries: int) -> ChatResponse:
    """Call ``provider.chat`` retrying on ProviderError; re-raises the last one."""
    for attempt in range(retries + 1):
        try:
            return provider.chat(req)
        except ProviderError:
            if attempt == retries:
                raise
            log.warning("chat call failed (attempt %d/%d), retrying", attempt + 1, retries + 1)
    raise AssertionError("unreachable")
