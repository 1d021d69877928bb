"""Uniform chat-completion client with caching, retries, and a mock backend.

One gateway fronts any number of named backends. Responses are cached as
content-addressed JSON files keyed by the request payload (tag excluded),
transient failures retry with exponential backoff, and map_bounded gives
order-preserving batch fan-out with a concurrency cap. The mock backend
makes the whole pipeline runnable offline; the tripwire backend proves it.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import requests

from .prompts import estimate_units


class GatewayError(RuntimeError):
    pass


class UnknownBackendError(GatewayError):
    pass


class TransientBackendError(GatewayError):
    """Rate limits, 5xx responses, connection failures; retried."""


class BackendUnavailableError(GatewayError):
    pass


class InvalidResponseError(GatewayError):
    pass


class TripwireTriggeredError(GatewayError):
    pass


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class Usage:
    prompt_units: int = 0
    completion_units: int = 0


@dataclass(frozen=True)
class ChatRequest:
    backend_id: str
    model_name: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 1.0
    max_output_units: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("messages must be nonempty")
        roles = [r for r, _ in msgs]
        for r in roles:
            if r not in ("system", "user", "assistant"):
                raise ValueError(f"unknown role {r!r}")
        non_system = [r for r in roles if r != "system"]
        if not non_system or non_system[0] != "user":
            raise ValueError("first non-system message must be from the user")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.max_output_units < 1:
            raise ValueError("max_output_units must be positive")

    def last_user_content(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return ""


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: FinishReason
    usage: Usage = Usage()
    cached: bool = False
    latency_ms: float = 0.0
    error: str | None = None


class Backend:
    """One wire adapter; complete() performs a single uncached attempt."""

    def complete(self, req: ChatRequest) -> ChatResponse:
        raise NotImplementedError


class MockBackend(Backend):
    """Table-driven offline backend.

    Resolution order: exact match on the last user message, then the
    first substring rule matching anywhere in the request text, then the
    fallback (echo the last user message behind a fixed prefix). A
    response value that is an Exception instance is raised instead.
    Instrumented with call and in-flight counters for concurrency tests.
    """

    def __init__(
        self,
        table: dict[str, object] | None = None,
        rules: list[tuple[str, object]] | None = None,
        fallback_prefix: str = "MOCK: ",
        delay_s: float = 0.0,
    ):
        self.table = dict(table or {})
        self.rules = list(rules or [])
        self.fallback_prefix = fallback_prefix
        self.delay_s = delay_s
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "MockBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            table=data.get("exact", {}),
            rules=[tuple(pair) for pair in data.get("rules", [])],
            **kwargs,
        )

    def _resolve(self, req: ChatRequest) -> object:
        last_user = req.last_user_content()
        if last_user in self.table:
            return self.table[last_user]
        haystack = "\n".join(content for _, content in req.messages)
        for needle, response in self.rules:
            if needle in haystack:
                return response
        return self.fallback_prefix + last_user

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            result = self._resolve(req)
            if isinstance(result, Exception):
                raise result
            content = str(result)
            return ChatResponse(
                content=content,
                finish_reason=FinishReason.STOP,
                usage=Usage(
                    prompt_units=int(
                        sum(estimate_units(c) for _, c in req.messages)
                    ),
                    completion_units=int(estimate_units(content)),
                ),
            )
        finally:
            with self._lock:
                self.in_flight -= 1


class TripwireBackend(Backend):
    """Fails loudly if anything ever routes a request to it."""

    def __init__(self):
        self.calls = 0

    def complete(self, req: ChatRequest) -> ChatResponse:
        self.calls += 1
        raise TripwireTriggeredError(
            f"tripwire backend received a request (tag={req.request_tag!r})"
        )


_TRANSIENT_STATUS = {429, 500, 502, 503, 504}


class HttpBackend(Backend):
    """Chat-completions JSON over HTTP(S): messages in, choices[0] out.

    Credentials come only from the environment variable named in the
    backend config, never from config values themselves.
    """

    def __init__(
        self,
        base_url: str,
        auth_env_var: str = "",
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.auth_env_var = auth_env_var
        self.timeout_s = timeout_s
        self.session = session if session is not None else requests.Session()

    def complete(self, req: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.auth_env_var:
            token = os.environ.get(self.auth_env_var, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": req.model_name,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_units,
        }
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout_s,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientBackendError(f"connection failure: {exc}") from exc
        if resp.status_code in _TRANSIENT_STATUS:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendUnavailableError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            message = data["choices"][0]["message"]
            content = message["content"]
            finish = data["choices"][0].get("finish_reason", "stop")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise InvalidResponseError(f"malformed completion payload: {exc}") from exc
        if content is None or (content == "" and finish == "stop"):
            raise InvalidResponseError("empty content with finish_reason=stop")
        usage = data.get("usage", {}) or {}
        return ChatResponse(
            content=content,
            finish_reason=FinishReason.LENGTH
            if finish == "length"
            else FinishReason.STOP,
            usage=Usage(
                prompt_units=int(usage.get("prompt_tokens", 0)),
                completion_units=int(usage.get("completion_tokens", 0)),
            ),
        )


def cache_key(req: ChatRequest) -> str:
    """Stable content hash over everything that shapes the response.

    request_tag is provenance only and deliberately excluded.
    """
    material = json.dumps(
        {
            "backend": req.backend_id,
            "model": req.model_name,
            "messages": [[r, c] for r, c in req.messages],
            "temperature": req.temperature,
            "max_output_units": req.max_output_units,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class Gateway:
    """Front door for all chat backends.

    send_chat consults the cache first, retries transient backend
    failures with exponential backoff (up to max_attempts), and persists
    successful responses. Safe for concurrent callers; cache writes are
    atomic (write to a temp file, then rename).
    """

    def __init__(
        self,
        backends: dict[str, Backend] | None = None,
        cache_dir: str | Path | None = None,
        no_cache: bool = False,
        max_attempts: int = 5,
        backoff_s: float = 0.5,
        sleep=time.sleep,
    ):
        self.backends = dict(backends or {})
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.no_cache = no_cache
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep

    def register(self, backend_id: str, backend: Backend) -> None:
        self.backends[backend_id] = backend

    def _cache_path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / key[:2] / f"{key}.json"

    def _cache_read(self, key: str) -> ChatResponse | None:
        path = self._cache_path(key)
        if path is None or self.no_cache or not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return ChatResponse(
            content=data["content"],
            finish_reason=FinishReason(data["finish_reason"]),
            usage=Usage(**data.get("usage", {})),
            cached=True,
        )

    def _cache_write(self, key: str, resp: ChatResponse) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(
            {
                "content": resp.content,
                "finish_reason": resp.finish_reason.value,
                "usage": {
                    "prompt_units": resp.usage.prompt_units,
                    "completion_units": resp.usage.completion_units,
                },
            },
            ensure_ascii=False,
            sort_keys=True,
        )
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        tmp.write_text(payload, encoding="utf-8")
        os.replace(tmp, path)

    def send_chat(self, req: ChatRequest) -> ChatResponse:
        if req.backend_id not in self.backends:
            raise UnknownBackendError(f"backend {req.backend_id!r} not registered")
        key = cache_key(req)
        hit = self._cache_read(key)
        if hit is not None:
            return hit
        backend = self.backends[req.backend_id]
        start = time.perf_counter()
        last_exc: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = backend.complete(req)
                break
            except TransientBackendError as exc:
                last_exc = exc
                if attempt + 1 < self.max_attempts:
                    self._sleep(self.backoff_s * (2**attempt))
        else:
            raise BackendUnavailableError(
                f"backend {req.backend_id!r} unavailable after "
                f"{self.max_attempts} attempts: {last_exc}"
            )
        resp = replace(resp, latency_ms=(time.perf_counter() - start) * 1000.0)
        if resp.finish_reason is not FinishReason.ERROR:
            self._cache_write(key, resp)
        return resp

    def map_bounded(
        self, reqs: list[ChatRequest], parallelism: int
    ) -> list[ChatResponse]:
        """Send a batch with at most `parallelism` requests in flight.

        Responses come back in input order; a failed item yields an
        error-marked response in its slot instead of aborting the batch.
        """
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        if not reqs:
            return []

        def one(req: ChatRequest) -> ChatResponse:
            try:
                return self.send_chat(req)
            except GatewayError as exc:
                return ChatResponse(
                    content="",
                    finish_reason=FinishReason.ERROR,
                    error=f"{type(exc).__name__}: {exc}",
                )

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, reqs))


@dataclass
class ChatClient:
    """A gateway bound to one backend, model, and sampling setup."""

    gateway: Gateway
    backend_id: str
    model_name: str = "default"
    temperature: float = 0.0
    max_output_units: int = 2048

    def ask(
        self,
        prompt: str,
        system: str | None = None,
        history: tuple[tuple[str, str], ...] = (),
        tag: str = "",
    ) -> ChatResponse:
        messages: list[tuple[str, str]] = []
        if system:
            messages.append(("system", system))
        messages.extend(history)
        messages.append(("user", prompt))
        return self.gateway.send_chat(
            ChatRequest(
                backend_id=self.backend_id,
                model_name=self.model_name,
                messages=tuple(messages),
                temperature=self.temperature,
                max_output_units=self.max_output_units,
                request_tag=tag,
            )
        )

    def ask_text(self, prompt: str, **kwargs) -> str:
        resp = self.ask(prompt, **kwargs)
        if resp.finish_reason is FinishReason.ERROR:
            raise BackendUnavailableError(resp.error or "backend error")
        return resp.content

    def send_messages(
        self, messages: tuple[tuple[str, str], ...], tag: str = ""
    ) -> ChatResponse:
        return self.gateway.send_chat(self.request_for_messages(messages, tag))

    def request_for(self, prompt: str, tag: str = "") -> ChatRequest:
        return self.request_for_messages((("user", prompt),), tag)

    def request_for_messages(
        self, messages: tuple[tuple[str, str], ...], tag: str = ""
    ) -> ChatRequest:
        return ChatRequest(
            backend_id=self.backend_id,
            model_name=self.model_name,
            messages=messages,
            temperature=self.temperature,
            max_output_units=self.max_output_units,
            request_tag=tag,
        )
