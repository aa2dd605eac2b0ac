import pytest

from mmplan.backends import BackendSet, CachingBackend, MockBackend, ResponseCache
from mmplan.pipeline.templates import TemplateLibrary


@pytest.fixture(scope="session")
def templates():
    return TemplateLibrary()


@pytest.fixture
def backend_factory(tmp_path):
    """Build a mock BackendSet; cache=True shares one on-disk cache per test."""

    def make(seed: int = 0, cache: bool = True, cache_dir=None) -> BackendSet:
        shared_cache = ResponseCache(cache_dir or tmp_path / "cache") if cache else None

        def wrap(backend):
            return CachingBackend(backend, shared_cache) if shared_cache else backend

        roles = {role: MockBackend(seed=seed) for role in ("chat", "vision", "t2i", "embed")}
        return BackendSet(
            chat=wrap(roles["chat"]),
            vision=wrap(roles["vision"]),
            t2i=wrap(roles["t2i"]),
            embed=wrap(roles["embed"]),
            models={role: f"mock-{role}" for role in roles},
        )

    return make
