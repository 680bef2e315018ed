"""Gateway to model backends: rate limiting, retries, caching, test doubles.

Backends serve two roles: the orchestrator writes programs and judges
candidate answers; the tool answers sub-questions about an image on behalf
of running guest code. The scripted backend makes the whole engine
deterministic for tests and smoke runs.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import requests

from .errors import (
    AuthError,
    BackendNotRegistered,
    GatewayError,
    GatewayTimeout,
    MalformedReply,
    ScriptedMiss,
)
from .prompts import IMAGE, TEXT, PromptPart, image_part, text_part

ORCHESTRATOR = "orchestrator"
TOOL = "tool"
JUDGE = "judge"

TOOL_ANSWER_INSTRUCTION = (
    "Answer the following question about the image tersely, in a few words, with no explanation."
)
TOOL_DESCRIBE_INSTRUCTION = "Describe this image."


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    n_samples: int = 1
    max_output: int = 4096

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class ModelRequest:
    parts: tuple[PromptPart, ...]
    sampling: Sampling = Sampling()
    role: str = ORCHESTRATOR

    def __post_init__(self):
        if not self.parts:
            raise ValueError("request must carry at least one part")

    def text(self) -> str:
        """All text parts joined, for matching and logging."""
        return "\n".join(p.payload for p in self.parts if p.kind == TEXT)

    def last_text(self) -> str:
        for p in reversed(self.parts):
            if p.kind == TEXT:
                return p.payload
        return ""

    def image_count(self) -> int:
        return sum(1 for p in self.parts if p.kind == IMAGE)


def make_request(parts: Sequence[PromptPart], sampling: Sampling = Sampling(), role: str = ORCHESTRATOR) -> ModelRequest:
    return ModelRequest(parts=tuple(parts), sampling=sampling, role=role)


@dataclass
class ModelResponse:
    candidates: list[str]
    backend_id: str
    latency: float = 0.0


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    endpoint: str = ""
    auth_env: str = ""
    rate_limit: float = 10.0
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be > 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


def canonical_request(backend_id: str, request: ModelRequest) -> str:
    """Stable, order-preserving serialization used for cache keys."""
    doc = {
        "backend": backend_id,
        "role": request.role,
        "parts": [{"kind": p.kind, "payload": p.payload} for p in request.parts],
        "sampling": {
            "temperature": request.sampling.temperature,
            "n_samples": request.sampling.n_samples,
            "max_output": request.sampling.max_output,
        },
    }
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def request_key(backend_id: str, request: ModelRequest) -> str:
    return hashlib.sha256(canonical_request(backend_id, request).encode("utf-8")).hexdigest()


class RateLimiter:
    """Sliding-window limiter: at most ceil(rate) calls in any 1-second window."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be > 0")
        self._limit = max(1, int(-(-rate // 1)))
        self._clock = clock
        self._sleep = sleep
        self._calls: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                # The eviction test mirrors the wait arithmetic exactly, so a
                # non-evictable head always implies a strictly positive wait.
                while self._calls and self._calls[0] + 1.0 <= now:
                    self._calls.popleft()
                if len(self._calls) < self._limit:
                    self._calls.append(now)
                    return
                wait = self._calls[0] + 1.0 - now
            self._sleep(wait)


class HttpBackend:
    """Adapter posting multimodal requests as JSON; images travel as base64."""

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        self.config = config
        self._session = session or requests.Session()

    def _encode_parts(self, parts: Sequence[PromptPart]) -> list[dict]:
        encoded = []
        for p in parts:
            if p.kind == TEXT:
                encoded.append({"text": p.payload})
            else:
                data = Path(p.payload).read_bytes()
                encoded.append({"image_b64": base64.b64encode(data).decode("ascii")})
        return encoded

    def complete(self, request: ModelRequest) -> list[str]:
        headers = {}
        if self.config.auth_env:
            credential = os.environ.get(self.config.auth_env)
            if not credential:
                raise AuthError(
                    f"backend {self.config.backend_id!r}: credential env var "
                    f"{self.config.auth_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {credential}"
        body = {
            "parts": self._encode_parts(request.parts),
            "temperature": request.sampling.temperature,
            "n": request.sampling.n_samples,
            "max_output_tokens": request.sampling.max_output,
            "role": request.role,
        }
        try:
            reply = self._session.post(
                self.config.endpoint, json=body, headers=headers, timeout=self.config.timeout
            )
        except requests.Timeout as exc:
            raise GatewayTimeout(f"backend {self.config.backend_id!r} timed out") from exc
        except requests.RequestException as exc:
            raise GatewayError(f"backend {self.config.backend_id!r} transport failure: {exc}") from exc
        if reply.status_code in (401, 403):
            raise AuthError(f"backend {self.config.backend_id!r} rejected credentials ({reply.status_code})")
        if reply.status_code >= 500 or reply.status_code == 429:
            raise GatewayError(f"backend {self.config.backend_id!r} returned {reply.status_code}")
        if reply.status_code != 200:
            raise MalformedReply(f"backend {self.config.backend_id!r} returned {reply.status_code}")
        try:
            payload = reply.json()
            candidates = payload["candidates"]
            if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
                raise KeyError("candidates")
        except (ValueError, KeyError) as exc:
            raise MalformedReply(f"backend {self.config.backend_id!r}: reply missing candidates") from exc
        return candidates


@dataclass
class ScriptedRule:
    """One scripted-backend rule: a matcher plus the replies it produces.

    Matchers: a bare string matches against the request's joined text; a dict
    may constrain ``text_contains``, ``question_contains`` (the last text
    part), ``role``, ``min_images``, ``max_images``; a callable receives the
    request.
    """

    match: object
    replies: list[str] = field(default_factory=list)

    def matches(self, request: ModelRequest) -> bool:
        cond = self.match
        if callable(cond):
            return bool(cond(request))
        if isinstance(cond, str):
            return cond in request.text()
        if isinstance(cond, dict):
            if "text_contains" in cond and cond["text_contains"] not in request.text():
                return False
            if "question_contains" in cond and cond["question_contains"] not in request.last_text():
                return False
            if "role" in cond and request.role != cond["role"]:
                return False
            if "min_images" in cond and request.image_count() < cond["min_images"]:
                return False
            if "max_images" in cond and request.image_count() > cond["max_images"]:
                return False
            return True
        raise TypeError(f"unsupported matcher {cond!r}")


class ScriptedBackend:
    """Deterministic test double; records every request it serves."""

    def __init__(self, rules: Sequence[ScriptedRule] | None = None):
        self.rules: list[ScriptedRule] = list(rules or [])
        self.log: list[ModelRequest] = []
        self._lock = threading.Lock()

    def add(self, match, replies: Sequence[str]) -> "ScriptedBackend":
        self.rules.append(ScriptedRule(match=match, replies=list(replies)))
        return self

    def complete(self, request: ModelRequest) -> list[str]:
        with self._lock:
            self.log.append(request)
        for rule in self.rules:
            if rule.matches(request):
                return rule.replies[: request.sampling.n_samples]
        raise ScriptedMiss(
            f"no scripted rule matches request (role={request.role}, "
            f"images={request.image_count()}, last_text={request.last_text()[:80]!r})"
        )


def scripted_backend(script: Sequence[tuple[object, Sequence[str]]]) -> ScriptedBackend:
    """Build a scripted backend from (matcher, replies) pairs."""
    return ScriptedBackend([ScriptedRule(match=m, replies=list(r)) for m, r in script])


class ResponseCache:
    """Content-addressed request/response store, in memory and on disk."""

    def __init__(self, cache_dir: str | Path | None = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memory: dict[str, list[str]] = {}
        self._lock = threading.Lock()
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[list[str]]:
        with self._lock:
            if key in self._memory:
                return list(self._memory[key])
        if self.cache_dir:
            path = self._path(key)
            if path.is_file():
                record = json.loads(path.read_text(encoding="utf-8"))
                candidates = record["candidates"]
                with self._lock:
                    self._memory[key] = list(candidates)
                return list(candidates)
        return None

    def put(self, key: str, canonical: str, candidates: list[str]) -> None:
        with self._lock:
            self._memory[key] = list(candidates)
        if self.cache_dir:
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            record = {"request": json.loads(canonical), "candidates": candidates}
            tmp = path.with_suffix(f".{os.getpid()}.tmp")
            tmp.write_text(json.dumps(record, sort_keys=True, ensure_ascii=False), encoding="utf-8")
            os.replace(tmp, path)


class Gateway:
    """Uniform entry point for all model calls made by the engine."""

    def __init__(
        self,
        cache: ResponseCache | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        max_in_flight: int | None = None,
    ):
        self._backends: dict[str, object] = {}
        self._configs: dict[str, BackendConfig] = {}
        self._limiters: dict[str, RateLimiter] = {}
        self.cache = cache
        self._clock = clock
        self._sleep = sleep
        self._in_flight = threading.Semaphore(max_in_flight) if max_in_flight else None

    def register(self, config: BackendConfig, backend=None) -> None:
        self._configs[config.backend_id] = config
        self._backends[config.backend_id] = backend if backend is not None else HttpBackend(config)
        self._limiters[config.backend_id] = RateLimiter(config.rate_limit, self._clock, self._sleep)

    def backend(self, backend_id: str):
        if backend_id not in self._backends:
            raise BackendNotRegistered(f"backend {backend_id!r} is not registered")
        return self._backends[backend_id]

    def generate(self, backend_id: str, request: ModelRequest) -> ModelResponse:
        backend = self.backend(backend_id)
        config = self._configs[backend_id]
        limiter = self._limiters[backend_id]
        attempts = max(1, config.max_attempts)
        last_exc: Exception | None = None
        for attempt in range(attempts):
            limiter.acquire()
            start = self._clock()
            try:
                if self._in_flight:
                    with self._in_flight:
                        candidates = backend.complete(request)
                else:
                    candidates = backend.complete(request)
            except (AuthError, MalformedReply, ScriptedMiss):
                raise
            except GatewayError as exc:
                last_exc = exc
                if attempt + 1 < attempts:
                    self._sleep(config.backoff * (2**attempt))
                continue
            latency = self._clock() - start
            if not candidates:
                raise MalformedReply(f"backend {backend_id!r} returned no candidates")
            return ModelResponse(
                candidates=candidates[: request.sampling.n_samples],
                backend_id=backend_id,
                latency=latency,
            )
        if isinstance(last_exc, GatewayTimeout):
            raise GatewayTimeout(f"backend {backend_id!r}: retries exhausted") from last_exc
        raise GatewayError(f"backend {backend_id!r}: retries exhausted: {last_exc}") from last_exc

    def cached_generate(self, backend_id: str, request: ModelRequest) -> ModelResponse:
        if self.cache is None:
            return self.generate(backend_id, request)
        canonical = canonical_request(backend_id, request)
        key = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
        hit = self.cache.get(key)
        if hit is not None:
            return ModelResponse(candidates=hit, backend_id=backend_id, latency=0.0)
        response = self.generate(backend_id, request)
        self.cache.put(key, canonical, response.candidates)
        return response


def image_tool(gateway: Gateway, backend_id: str, image_ref: str, sampling: Sampling = Sampling()):
    """Tool handle for guest runs: (method, question) -> terse text answer."""

    def call(method: str, question: Optional[str]) -> str:
        if method == "answer":
            if not question:
                raise ValueError("answer tool call requires a question")
            parts = [text_part(TOOL_ANSWER_INSTRUCTION), image_part(image_ref), text_part(question)]
        elif method == "describe":
            parts = [text_part(TOOL_DESCRIBE_INSTRUCTION), image_part(image_ref)]
        else:
            raise ValueError(f"unknown tool method {method!r}")
        response = gateway.cached_generate(backend_id, make_request(parts, sampling, role=TOOL))
        return response.candidates[0].strip()

    return call
