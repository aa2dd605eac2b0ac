from .base import (
    Backend,
    BackendRequest,
    BackendResponse,
    BackendSet,
    Capability,
    Message,
    validate_shape,
)
from .cache import CachingBackend, ResponseCache
from .http import HttpBackend, RateLimiter, RetryPolicy
from .mock import MockBackend, build_mock_png, embed_text, read_provenance, salient_tokens, tokens

__all__ = [
    "Backend",
    "BackendRequest",
    "BackendResponse",
    "BackendSet",
    "CachingBackend",
    "Capability",
    "HttpBackend",
    "Message",
    "MockBackend",
    "RateLimiter",
    "ResponseCache",
    "RetryPolicy",
    "build_mock_png",
    "embed_text",
    "read_provenance",
    "salient_tokens",
    "tokens",
    "validate_shape",
]
