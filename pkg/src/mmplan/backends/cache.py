"""Content-addressed response cache keyed by canonical request hashes.

Layout: ``<root>/<capability>/<first two hex chars>/<key>.json`` with
``<key>_<i>.png`` siblings for image payloads. The JSON file is written last
and atomically, so its presence marks a complete entry; concurrent writers of
the same key are no-ops after the first.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from ..core.serialization import atomic_write_bytes, atomic_write_text, dump_json
from .base import Backend, BackendRequest, BackendResponse, validate_shape


class ResponseCache:
    def __init__(self, root: Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _entry(self, capability: str, key: str) -> Path:
        return self.root / capability / key[:2] / f"{key}.json"

    def get(self, request: BackendRequest) -> BackendResponse | None:
        entry = self._entry(request.capability.value, request.cache_key())
        if not entry.is_file():
            return None
        with open(entry, encoding="utf-8") as fh:
            doc = json.load(fh)
        images = None
        n = doc.get("n_images")
        if n is not None:
            blobs = []
            for i in range(n):
                sibling = entry.with_name(f"{entry.stem}_{i}.png")
                if not sibling.is_file():
                    return None  # torn entry; treat as a miss
                blobs.append(sibling.read_bytes())
            images = tuple(blobs)
        return BackendResponse(
            text=doc.get("text"),
            images=images,
            embedding=tuple(doc["embedding"]) if doc.get("embedding") is not None else None,
            usage=doc.get("usage", {}),
            cached=True,
            meta=doc.get("meta", {}),
        )

    def _complete(self, entry: Path) -> bool:
        try:
            with open(entry, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError):
            return False
        n = doc.get("n_images")
        if n is None:
            return True
        return all(entry.with_name(f"{entry.stem}_{i}.png").is_file() for i in range(n))

    def put(self, request: BackendRequest, response: BackendResponse) -> None:
        entry = self._entry(request.capability.value, request.cache_key())
        with self._lock:
            if entry.is_file() and self._complete(entry):
                return  # first writer wins; torn entries are rewritten
            doc = {
                "text": response.text,
                "embedding": list(response.embedding) if response.embedding is not None else None,
                "usage": response.usage,
                "meta": response.meta,
                "n_images": len(response.images) if response.images is not None else None,
            }
            if response.images is not None:
                for i, blob in enumerate(response.images):
                    atomic_write_bytes(entry.with_name(f"{entry.stem}_{i}.png"), blob)
            atomic_write_text(entry, dump_json(doc))


class CachingBackend:
    """Wraps any backend with read-through caching and shape validation."""

    def __init__(self, inner: Backend, cache: ResponseCache):
        self.inner = inner
        self.cache = cache

    def invoke(self, request: BackendRequest) -> BackendResponse:
        hit = self.cache.get(request)
        if hit is not None:
            return hit
        response = self.inner.invoke(request)
        validate_shape(request, response)
        self.cache.put(request, response)
        return response
