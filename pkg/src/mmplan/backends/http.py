"""HTTP backends speaking the common hosted-model wire protocols.

- Chat / vision chat: POST <base>/v1/chat/completions, images as base64 data
  URLs inside content parts, text read from choices[0].message.content.
- Embeddings: POST <base>/v1/embeddings, vector from data[0].embedding.
- Image generation: POST <base>/v1/images/generations, PNGs from b64_json.

Transient failures (connection errors, HTTP >= 500) retry with exponential
backoff up to the attempt budget; 4xx fail immediately.
"""

from __future__ import annotations

import base64
import os
import threading
import time
from dataclasses import dataclass

import requests

from ..errors import HttpStatusError, ProtocolError, TransportError
from .base import BackendRequest, BackendResponse, Capability, Message


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 4.0

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based over failures)."""
        return self.backoff_base * self.backoff_factor ** (attempt - 1)


class RateLimiter:
    """Token bucket at ``per_minute`` requests/minute, thread-safe."""

    def __init__(self, per_minute: float, clock=time.monotonic, sleep=time.sleep):
        if per_minute <= 0:
            raise ValueError("per_minute must be positive")
        self.rate = per_minute / 60.0
        self.capacity = max(1.0, per_minute / 60.0)
        self.tokens = self.capacity
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


def _data_url(png_bytes: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes).decode("ascii")


def _content_parts(message: Message):
    if not message.images:
        return message.text
    parts = []
    if message.text:
        parts.append({"type": "text", "text": message.text})
    for blob in message.images:
        parts.append({"type": "image_url", "image_url": {"url": _data_url(blob)}})
    return parts


class HttpBackend:
    """One HTTP endpoint bound to one model; capability comes per request."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        api_key_env: str | None = None,
        timeout: float = 120.0,
        retry: RetryPolicy = RetryPolicy(),
        rate_limiter: RateLimiter | None = None,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key or (os.environ.get(api_key_env, "") if api_key_env else "")
        self.timeout = timeout
        self.retry = retry
        self.rate_limiter = rate_limiter
        self.session = session or requests.Session()
        self.sleep = sleep
        self.calls = 0

    # -- transport ----------------------------------------------------------

    def _post(self, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        failures = 0
        while True:
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            self.calls += 1
            try:
                resp = self.session.post(
                    f"{self.base_url}{path}", json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                failures += 1
                if failures >= self.retry.attempts:
                    raise TransportError(f"{exc} (after {failures} attempts)") from exc
                self.sleep(self.retry.delay(failures))
                continue
            if resp.status_code >= 500:
                failures += 1
                if failures >= self.retry.attempts:
                    raise HttpStatusError(resp.status_code, resp.text)
                self.sleep(self.retry.delay(failures))
                continue
            if resp.status_code >= 400:
                raise HttpStatusError(resp.status_code, resp.text)
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {path}") from exc

    # -- capabilities ---------------------------------------------------------

    def invoke(self, request: BackendRequest) -> BackendResponse:
        cap = request.capability
        if cap in (Capability.CHAT, Capability.VISION_CHAT):
            return self._chat(request)
        if cap is Capability.EMBED:
            return self._embed(request)
        if cap is Capability.TEXT_TO_IMAGE:
            return self._images(request)
        raise ProtocolError(f"unsupported capability: {cap}")  # pragma: no cover

    def _chat(self, request: BackendRequest) -> BackendResponse:
        payload = {
            "model": request.model or self.model,
            "messages": [{"role": m.role, "content": _content_parts(m)} for m in request.messages],
        }
        for key in ("temperature", "max_tokens", "seed"):
            if key in request.params and request.params[key] is not None:
                payload[key] = request.params[key]
        doc = self._post("/v1/chat/completions", payload)
        try:
            text = doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("chat response missing choices[0].message.content") from exc
        if not isinstance(text, str):
            raise ProtocolError("chat response content is not text")
        return BackendResponse(text=text, usage=_usage(doc))

    def _embed(self, request: BackendRequest) -> BackendResponse:
        blobs = request.all_images()
        source = _data_url(blobs[0]) if blobs else request.last_user_text()
        doc = self._post("/v1/embeddings", {"model": request.model or self.model, "input": source})
        try:
            vector = doc["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("embedding response missing data[0].embedding") from exc
        return BackendResponse(embedding=tuple(float(x) for x in vector), usage=_usage(doc))

    def _images(self, request: BackendRequest) -> BackendResponse:
        w, h = request.params.get("image_size", (512, 512))
        payload = {
            "model": request.model or self.model,
            "prompt": request.last_user_text(),
            "n": int(request.params.get("n", 1)),
            "size": f"{w}x{h}",
        }
        if request.params.get("seed") is not None:
            payload["seed"] = request.params["seed"]
        doc = self._post("/v1/images/generations", payload)
        try:
            blobs = tuple(base64.b64decode(item["b64_json"]) for item in doc["data"])
        except (KeyError, TypeError) as exc:
            raise ProtocolError("image response missing data[].b64_json") from exc
        if not blobs:
            raise ProtocolError("image response contained no images")
        return BackendResponse(images=blobs, usage=_usage(doc))


def _usage(doc: dict) -> dict[str, int]:
    usage = doc.get("usage") or {}
    return {k: int(v) for k, v in usage.items() if isinstance(v, (int, float))}
