"""Transport to an inference backend.

Wire protocol (JSON over HTTP):

``GET /v1/capabilities``
    ``{"chat": bool, "score": bool}``
``POST /v1/chat/completions``
    Chat-completions request with ``n``, sampling parameters, ``seed``,
    ``logprobs`` and ``top_logprobs``.  Each choice carries
    ``logprobs.content``: a list of ``{"token", "logprob", "entropy"?,
    "top_logprobs"?}``.  ``entropy`` is an optional extension field.
``POST /v1/score``
    Teacher-forced scoring: ``{"model", "messages", "continuation",
    "top_logprobs"}``.  The last message is a partial assistant turn that
    the continuation extends.  Returns ``{"tokens": [...]}`` in the same
    per-token shape as above, covering exactly the continuation.

Errors come back as HTTP status codes with ``{"error": {"code", "message"}}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Protocol

import httpx


class BackendError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, code: str | None = None):
        super().__init__(message)
        self.status = status
        self.code = code

    @property
    def retryable(self) -> bool:
        return self.status is None or self.status >= 500 or self.status == 429


class UnsupportedBackend(BackendError):
    pass


class ContextOverflow(BackendError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    auth_env: str | None = "REASONUQ_API_KEY"
    timeout: float = 600.0
    max_in_flight: int = 8
    retries: int = 3
    backoff: float = 0.5

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be ≥ 1")
        if self.retries < 0:
            raise ValueError("retries must be ≥ 0")


class Backend(Protocol):
    def request(self, method: str, path: str, body: bytes | None = None) -> dict:
        """Send one request; raise :class:`BackendError` on failure."""


def canonical_json(payload: dict) -> bytes:
    """Byte-stable encoding used for every request body."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def error_from_body(status: int, body: dict | None) -> BackendError:
    err = (body or {}).get("error") or {}
    code = err.get("code")
    message = err.get("message") or f"HTTP {status}"
    if code == "context_length_exceeded":
        return ContextOverflow(message, status, code)
    return BackendError(message, status, code)


class HttpBackend:
    def __init__(self, config: BackendConfig):
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.auth_env) if config.auth_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(base_url=config.base_url, timeout=config.timeout, headers=headers)

    def request(self, method: str, path: str, body: bytes | None = None) -> dict:
        try:
            resp = self._client.request(method, path, content=body)
        except httpx.TimeoutException as exc:
            raise BackendError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise BackendError(f"transport error: {exc}") from exc
        try:
            data = resp.json()
        except ValueError:
            data = None
        if resp.status_code >= 400:
            raise error_from_body(resp.status_code, data)
        if not isinstance(data, dict):
            raise BackendError("backend returned a non-object body", resp.status_code)
        return data

    def close(self) -> None:
        self._client.close()
