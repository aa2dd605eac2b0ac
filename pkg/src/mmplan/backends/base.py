"""Uniform model-backend abstraction: canonical requests, shape-checked
responses, and capability routing.

Every model call in the toolkit flows through a :class:`BackendRequest`. Its
canonical JSON serialization (sorted keys, message bodies verbatim, images as
content hashes) defines the cache key, so equal requests always hit the same
cache entry regardless of params insertion order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol

from ..errors import ConfigError, ProtocolError


class Capability(str, Enum):
    CHAT = "chat"
    VISION_CHAT = "vision_chat"
    TEXT_TO_IMAGE = "text_to_image"
    EMBED = "embed"


@dataclass(frozen=True)
class Message:
    role: str  # system | user | assistant
    text: str = ""
    images: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class BackendRequest:
    capability: Capability
    model: str
    messages: tuple[Message, ...]
    params: dict[str, Any] = field(default_factory=dict)

    def canonical(self) -> str:
        doc = {
            "capability": self.capability.value,
            "model": self.model,
            "messages": [
                {
                    "role": m.role,
                    "text": m.text,
                    "images": [hashlib.sha256(b).hexdigest() for b in m.images],
                }
                for m in self.messages
            ],
            "params": _canonical_value(self.params),
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))

    def cache_key(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def last_user_text(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.text
        return ""

    def last_assistant_text(self) -> str:
        for m in reversed(self.messages):
            if m.role == "assistant":
                return m.text
        return ""

    def all_images(self) -> list[bytes]:
        return [b for m in self.messages for b in m.images]


def _canonical_value(v):
    if isinstance(v, dict):
        return {str(k): _canonical_value(v[k]) for k in sorted(v, key=str)}
    if isinstance(v, (list, tuple)):
        return [_canonical_value(x) for x in v]
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    raise TypeError(f"non-canonical param value: {type(v).__name__}")


@dataclass(frozen=True)
class BackendResponse:
    text: str | None = None
    images: tuple[bytes, ...] | None = None
    embedding: tuple[float, ...] | None = None
    usage: dict[str, int] = field(default_factory=dict)
    cached: bool = False
    meta: dict[str, Any] = field(default_factory=dict)


def validate_shape(request: BackendRequest, response: BackendResponse) -> None:
    """Exactly the fields matching the capability must be populated."""
    cap = request.capability
    if cap in (Capability.CHAT, Capability.VISION_CHAT):
        ok = response.text is not None and response.images is None and response.embedding is None
    elif cap is Capability.TEXT_TO_IMAGE:
        ok = response.images and response.text is None and response.embedding is None
    elif cap is Capability.EMBED:
        ok = response.embedding is not None and response.text is None and response.images is None
    else:  # pragma: no cover - enum is closed
        ok = False
    if not ok:
        raise ProtocolError(f"response shape does not match capability {cap.value}")


class Backend(Protocol):
    def invoke(self, request: BackendRequest) -> BackendResponse:
        ...


@dataclass
class BackendSet:
    """Backends bound per pipeline role, plus the model name each role uses
    (model names participate in cache keys). chat also serves vision when no
    dedicated vision backend is configured."""

    chat: Backend | None = None
    vision: Backend | None = None
    t2i: Backend | None = None
    embed: Backend | None = None
    models: dict[str, str] = field(default_factory=dict)

    def for_capability(self, cap: Capability) -> Backend:
        mapping = {
            Capability.CHAT: self.chat,
            Capability.VISION_CHAT: self.vision or self.chat,
            Capability.TEXT_TO_IMAGE: self.t2i,
            Capability.EMBED: self.embed,
        }
        backend = mapping.get(cap)
        if backend is None:
            raise ConfigError(f"no backend configured for capability {cap.value}")
        return backend

    def invoke(self, request: BackendRequest) -> BackendResponse:
        response = self.for_capability(request.capability).invoke(request)
        validate_shape(request, response)
        return response

    def total_inner_calls(self) -> int:
        """Sum of non-cached model invocations across distinct backends."""
        seen: dict[int, int] = {}
        for b in (self.chat, self.vision, self.t2i, self.embed):
            inner = _unwrap(b)
            if inner is not None and hasattr(inner, "calls"):
                seen[id(inner)] = inner.calls
        return sum(seen.values())


def _unwrap(backend):
    while backend is not None and hasattr(backend, "inner"):
        backend = backend.inner
    return backend
