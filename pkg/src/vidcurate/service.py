"""Chat-completion service client shared by the text and vision stages.

Speaks the common ``POST {model, messages, temperature}`` ->
``choices[0].message.content`` wire shape. Transient failures (transport
errors, 429, 5xx) are retried with exponential backoff.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol

import httpx

from .atomic import atomic_write_text

log = logging.getLogger(__name__)


class ServiceError(RuntimeError):
    pass


class TransientServiceError(ServiceError):
    pass


class ChatBackend(Protocol):
    model: str

    def complete(self, messages: list[dict[str, Any]]) -> str: ...


@dataclass(frozen=True)
class Endpoint:
    url: str
    model: str
    api_key: str | None = None
    timeout_s: float = 120.0

    @classmethod
    def from_env(cls, prefix: str, model: str, url: str | None = None) -> "Endpoint":
        """Read ``{prefix}_URL`` / ``{prefix}_KEY``, e.g. OPHORA_LLM_URL."""
        url = url or os.environ.get(f"{prefix}_URL")
        if not url:
            raise ServiceError(f"no endpoint configured: set {prefix}_URL")
        return cls(url=url, model=model, api_key=os.environ.get(f"{prefix}_KEY"))


class Throttle:
    """Bounds concurrent requests and spaces request starts."""

    def __init__(self, max_in_flight: int = 8, min_interval_s: float = 0.0,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self.min_interval_s = min_interval_s
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._next_start = 0.0
        self._clock = clock
        self._sleep = sleep

    @contextmanager
    def slot(self):
        with self._slots:
            if self.min_interval_s > 0:
                with self._lock:
                    now = self._clock()
                    wait = self._next_start - now
                    self._next_start = max(now, self._next_start) + self.min_interval_s
                if wait > 0:
                    self._sleep(wait)
            yield


class ChatClient:
    def __init__(self, endpoint: Endpoint, *, http: httpx.Client | None = None,
                 throttle: Throttle | None = None, temperature: float = 0.0,
                 max_attempts: int = 5, backoff_base_s: float = 1.0, backoff_factor: float = 2.0,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = endpoint.model
        self.http = http or httpx.Client(timeout=endpoint.timeout_s)
        self.throttle = throttle or Throttle()
        self.temperature = temperature
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.backoff_factor = backoff_factor
        self.sleep = sleep
        self.calls = 0
        self._calls_lock = threading.Lock()

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        with self.throttle.slot():
            with self._calls_lock:
                self.calls += 1
            try:
                resp = self.http.post(self.endpoint.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                raise TransientServiceError(f"transport error: {exc!r}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientServiceError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ServiceError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ServiceError(f"unexpected response shape: {resp.text[:200]}") from exc
        if isinstance(content, list):  # some servers return content parts
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content if isinstance(content, str) else ""

    def complete(self, messages: list[dict[str, Any]]) -> str:
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        delay = self.backoff_base_s
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self._post(payload)
            except TransientServiceError as exc:
                if attempt == self.max_attempts:
                    raise ServiceError(f"giving up after {attempt} attempts: {exc}") from exc
                log.warning("transient failure (%s), retry %d in %.1fs", exc, attempt, delay)
                self.sleep(delay)
                delay *= self.backoff_factor
        raise AssertionError("unreachable")


def content_hash(*parts: str | bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        data = part.encode("utf-8") if isinstance(part, str) else part
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


class ResultCache:
    """Content-addressed JSON files: ``root/ab/abcdef....json``."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        if self.root is None:
            return None
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            log.warning("ignoring corrupt cache entry %s", path)
            return None

    def put(self, key: str, value: dict) -> None:
        if self.root is None:
            return
        atomic_write_text(self._path(key), json.dumps(value, sort_keys=True, ensure_ascii=False))
