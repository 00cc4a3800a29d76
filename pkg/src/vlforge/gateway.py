"""Provider-agnostic chat/vision-chat completion client.

One gateway fronts every generation, refinement, filtering and judging stage:
bounded concurrency, exponential-backoff retry, a token-bucket rate limit, a
response cache keyed by request hash, and a deterministic offline stub backend
(a JSONL script) that all tests run against.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

logger = logging.getLogger(__name__)

API_BASE_ENV = "VLFORGE_API_BASE"
API_KEY_ENV = "VLFORGE_API_KEY"


class GatewayError(Exception):
    """Base class for gateway failures."""


class RetriesExhaustedError(GatewayError):
    """All retry attempts failed; carries the last transient status."""

    def __init__(self, message: str, last_status: object = None, attempts: int = 0):
        super().__init__(message)
        self.last_status = last_status
        self.attempts = attempts


class ProtocolError(GatewayError):
    """The backend replied with something that is not a completion."""


class ConfigurationError(GatewayError):
    """No usable backend: missing endpoint, credential, or stub rule set."""


class TransientBackendError(GatewayError):
    """Retriable failure (scripted stub failure, 429/5xx, connection error)."""

    def __init__(self, message: str, status: object = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class ModelRequest:
    """One completion request; request_key is a pure function of the fields."""

    model_id: str
    system_prompt: str
    user_text: str
    image_ref: str | None = None
    temperature: float = 0.0
    max_tokens: int = 512

    @property
    def request_key(self) -> str:
        payload = json.dumps(
            {
                "model_id": self.model_id,
                "system_prompt": self.system_prompt,
                "user_text": self.user_text,
                "image_ref": self.image_ref,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class ModelResponse:
    text: str
    backend: str  # remote | stub | cache
    latency_ms: int = 0
    attempt_count: int = 1


class TokenBucket:
    """Thread-safe token bucket; acquire() blocks until a token is free."""

    def __init__(
        self,
        rate: float,
        burst: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be > 0 and burst >= 1")
        self.rate = float(rate)
        self.burst = int(burst)
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(burst)
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(
                    self.burst, self._tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class StubBackend:
    """Deterministic scripted backend driven by a JSONL rule file.

    Each record: {"match": ..., "response": str, "fail_times": int, "delay_ms": int}.
    ``match`` is either a 64-hex request_key, a regex searched in the user text,
    or an object {"key": ...} / {"regex": ...}. First matching rule wins;
    ``fail_times`` makes the first N hits raise a transient failure.
    """

    def __init__(self, rules: Sequence[dict], sleep: Callable[[float], None] = time.sleep):
        self._rules = []
        for rule in rules:
            match = rule.get("match", "")
            if isinstance(match, dict):
                key = match.get("key")
                pattern = match.get("regex")
            elif isinstance(match, str) and re.fullmatch(r"[0-9a-f]{64}", match):
                key, pattern = match, None
            else:
                key, pattern = None, str(match)
            self._rules.append({
                "key": key,
                "regex": re.compile(pattern, re.DOTALL) if pattern is not None else None,
                "response": rule.get("response", ""),
                "fail_times": int(rule.get("fail_times", 0)),
                "delay_ms": int(rule.get("delay_ms", 0)),
                "failures_left": int(rule.get("fail_times", 0)),
            })
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls: list[tuple[float, str, str]] = []  # (timestamp, model_id, request_key)

    @classmethod
    def from_script(cls, path: Path | str, **kwargs) -> "StubBackend":
        rules = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    rules.append(json.loads(line))
        return cls(rules, **kwargs)

    def send(self, request: ModelRequest) -> str:
        with self._lock:
            self.calls.append((time.monotonic(), request.model_id, request.request_key))
            rule = self._find(request)
            if rule is None:
                raise ProtocolError(
                    f"no stub rule matches request (model={request.model_id})")
            must_fail = rule["failures_left"] > 0
            if must_fail:
                rule["failures_left"] -= 1
            delay_ms = rule["delay_ms"]
        if delay_ms:
            self._sleep(delay_ms / 1000.0)
        if must_fail:
            raise TransientBackendError("scripted stub failure", status="stub-fail")
        return rule["response"]

    def _find(self, request: ModelRequest) -> dict | None:
        for rule in self._rules:
            if rule["key"] is not None and rule["key"] == request.request_key:
                return rule
            if rule["regex"] is not None and rule["regex"].search(request.user_text):
                return rule
        return None


class RemoteBackend:
    """OpenAI-compatible chat-completions endpoint; images go as data URLs."""

    RETRIABLE_STATUS = {408, 429, 500, 502, 503, 504}

    def __init__(
        self,
        api_base: str | None = None,
        api_key: str | None = None,
        image_loader: Callable[[str], bytes] | None = None,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.api_base = (api_base or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        if not self.api_base:
            raise ConfigurationError(f"no API base configured ({API_BASE_ENV})")
        if not self.api_key:
            raise ConfigurationError(f"no API credential configured ({API_KEY_ENV})")
        self.image_loader = image_loader
        self.timeout = timeout
        self.session = session or requests.Session()

    def send(self, request: ModelRequest) -> str:
        content: object = request.user_text
        if request.image_ref is not None:
            if self.image_loader is None:
                raise ConfigurationError("request has an image but no image loader is set")
            data = self.image_loader(request.image_ref)
            mime = "image/png" if data[:8] == b"\x89PNG\r\n\x1a\n" else "image/jpeg"
            content = [
                {"type": "text", "text": request.user_text},
                {"type": "image_url", "image_url": {
                    "url": f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"}},
            ]
        payload = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        try:
            resp = self.session.post(
                f"{self.api_base}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"connection failure: {exc}", status="conn") from exc
        if resp.status_code in self.RETRIABLE_STATUS:
            raise TransientBackendError(
                f"retriable HTTP {resp.status_code}", status=resp.status_code)
        if resp.status_code in (401, 403):
            raise ConfigurationError(f"credential rejected (HTTP {resp.status_code})")
        if resp.status_code != 200:
            raise ProtocolError(f"unexpected HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed backend reply: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("backend reply content is not text")
        return text


class ModelGateway:
    """Retry, rate-limit, cache and fan out requests to one backend."""

    def __init__(
        self,
        backend,
        cache_dir: Path | str | None = None,
        attempts: int = 4,
        backoff_base_ms: int = 500,
        backoff_cap_ms: int = 30000,
        rate_limit: float | None = None,
        rate_burst: int = 10,
        parallelism_cap: int = 16,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        if backend is None:
            raise ConfigurationError("a backend is required")
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.attempts = max(1, attempts)
        self.backoff_base_ms = backoff_base_ms
        self.backoff_cap_ms = backoff_cap_ms
        self.parallelism_cap = parallelism_cap
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._bucket = (
            TokenBucket(rate_limit, rate_burst, sleep=sleep) if rate_limit else None)
        self._counters: dict[str, int] = {}
        self._counters_lock = threading.Lock()
        self._inflight: dict[str, threading.Lock] = {}
        self._inflight_lock = threading.Lock()

    # -- bookkeeping ---------------------------------------------------

    def call_count(self, model_id: str | None = None) -> int:
        """Backend calls actually made (cache hits excluded)."""
        with self._counters_lock:
            if model_id is None:
                return sum(self._counters.values())
            return self._counters.get(model_id, 0)

    def _record_call(self, model_id: str) -> None:
        with self._counters_lock:
            self._counters[model_id] = self._counters.get(model_id, 0) + 1

    # -- cache -----------------------------------------------------------

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def _cache_read(self, key: str) -> str | None:
        path = self._cache_path(key)
        if path and path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))["text"]
        return None

    def _cache_write(self, key: str, text: str) -> None:
        path = self._cache_path(key)
        if path:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(
                json.dumps({"text": text}, ensure_ascii=False), encoding="utf-8")

    # -- completion ------------------------------------------------------

    def complete(self, request: ModelRequest) -> ModelResponse:
        """Complete one request: cache -> backend with retry/backoff."""
        key = request.request_key
        cached = self._cache_read(key)
        if cached is not None:
            return ModelResponse(text=cached, backend="cache", latency_ms=0,
                                 attempt_count=0)
        if self.cache_dir is None:
            return self._complete_uncached(request)
        # Per-key lock so N identical concurrent requests cause one backend call.
        with self._inflight_lock:
            lock = self._inflight.setdefault(key, threading.Lock())
        with lock:
            cached = self._cache_read(key)
            if cached is not None:
                return ModelResponse(text=cached, backend="cache", latency_ms=0,
                                     attempt_count=0)
            response = self._complete_uncached(request)
            self._cache_write(key, response.text)
            return response

    def _complete_uncached(self, request: ModelRequest) -> ModelResponse:
        started = time.monotonic()
        last: TransientBackendError | None = None
        for attempt in range(1, self.attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            self._record_call(request.model_id)
            try:
                text = self.backend.send(request)
            except TransientBackendError as exc:
                last = exc
                if attempt < self.attempts:
                    self._sleep(self._backoff_seconds(attempt))
                continue
            latency = int((time.monotonic() - started) * 1000)
            backend_name = "stub" if isinstance(self.backend, StubBackend) else "remote"
            return ModelResponse(text=text, backend=backend_name,
                                 latency_ms=latency, attempt_count=attempt)
        raise RetriesExhaustedError(
            f"gave up after {self.attempts} attempts: {last}",
            last_status=last.status if last else None,
            attempts=self.attempts,
        )

    def _backoff_seconds(self, attempt: int) -> float:
        base = min(self.backoff_base_ms * (2 ** (attempt - 1)), self.backoff_cap_ms)
        return (base * self._rng.uniform(0.5, 1.0)) / 1000.0

    def complete_batch(
        self, requests_: Sequence[ModelRequest], parallelism: int
    ) -> list[ModelResponse | GatewayError]:
        """Fan out with at most ``parallelism`` in flight; responses (or the
        per-item error) come back in input order."""
        if parallelism < 1 or parallelism > self.parallelism_cap:
            raise ValueError(
                f"parallelism must be in [1, {self.parallelism_cap}], got {parallelism}")
        if not requests_:
            return []

        def run_one(req: ModelRequest) -> ModelResponse | GatewayError:
            try:
                return self.complete(req)
            except GatewayError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(run_one, requests_))


def build_gateway(
    stub_script: Path | str | None = None,
    api_base: str | None = None,
    api_key: str | None = None,
    image_loader: Callable[[str], bytes] | None = None,
    cache_dir: Path | str | None = None,
    **kwargs,
) -> ModelGateway:
    """Pick the stub backend when a script is given, else the remote one."""
    if stub_script:
        backend = StubBackend.from_script(stub_script)
    else:
        backend = RemoteBackend(api_base=api_base, api_key=api_key,
                                image_loader=image_loader)
    return ModelGateway(backend, cache_dir=cache_dir, **kwargs)
