import threading

import numpy as np
import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from mmplan.backends.base import (
    BackendRequest,
    BackendResponse,
    BackendSet,
    Capability,
    Message,
    validate_shape,
)
from mmplan.backends.cache import CachingBackend, ResponseCache
from mmplan.backends.http import HttpBackend, RateLimiter, RetryPolicy
from mmplan.backends.mock import MockBackend, build_mock_png
from mmplan.errors import ConfigError, HttpStatusError, ProtocolError, TransportError


def chat_request(text="hello", **params):
    return BackendRequest(
        capability=Capability.CHAT,
        model="m",
        messages=(Message(role="user", text=text),),
        params=params,
    )


class TestCanonicalization:
    def test_equal_requests_equal_keys(self):
        assert chat_request(temperature=0.5, seed=1).cache_key() == chat_request(
            temperature=0.5, seed=1
        ).cache_key()

    def test_param_insertion_order_irrelevant(self):
        a = BackendRequest(Capability.CHAT, "m", (Message("user", "x"),), {"a": 1, "b": 2})
        b = BackendRequest(Capability.CHAT, "m", (Message("user", "x"),), {"b": 2, "a": 1})
        assert a.cache_key() == b.cache_key()

    def test_key_depends_on_model_seed_and_body(self):
        base = chat_request(seed=1)
        assert base.cache_key() != chat_request(seed=2).cache_key()
        assert base.cache_key() != chat_request("other", seed=1).cache_key()
        other_model = BackendRequest(Capability.CHAT, "m2", base.messages, base.params)
        assert base.cache_key() != other_model.cache_key()

    def test_bodies_verbatim_whitespace_matters(self):
        assert chat_request("a  b").cache_key() != chat_request("a b").cache_key()

    def test_images_hash_by_content(self):
        png = build_mock_png("p", 1)
        a = BackendRequest(Capability.EMBED, "m", (Message("user", "", images=(png,)),), {})
        b = BackendRequest(Capability.EMBED, "m", (Message("user", "", images=(png,)),), {})
        assert a.cache_key() == b.cache_key()

    @settings(max_examples=30, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(), max_size=5), st.randoms())
    def test_property_param_permutation_stable(self, params, rng):
        items = list(params.items())
        rng.shuffle(items)
        a = BackendRequest(Capability.CHAT, "m", (Message("user", "x"),), dict(params))
        b = BackendRequest(Capability.CHAT, "m", (Message("user", "x"),), dict(items))
        assert a.cache_key() == b.cache_key()


class TestShapeValidation:
    def test_chat_needs_text(self):
        with pytest.raises(ProtocolError):
            validate_shape(chat_request(), BackendResponse(images=(b"x",)))
        validate_shape(chat_request(), BackendResponse(text="ok"))

    def test_embed_needs_vector(self):
        req = BackendRequest(Capability.EMBED, "m", (Message("user", "x"),), {})
        with pytest.raises(ProtocolError):
            validate_shape(req, BackendResponse(text="no"))
        validate_shape(req, BackendResponse(embedding=(1.0,)))

    def test_t2i_needs_images(self):
        req = BackendRequest(Capability.TEXT_TO_IMAGE, "m", (Message("user", "x"),), {})
        with pytest.raises(ProtocolError):
            validate_shape(req, BackendResponse(text="no"))
        validate_shape(req, BackendResponse(images=(b"png",)))


class TestBackendSet:
    def test_missing_capability_is_config_error(self):
        empty = BackendSet()
        with pytest.raises(ConfigError):
            empty.invoke(chat_request())

    def test_vision_falls_back_to_chat(self):
        mock = MockBackend()
        bs = BackendSet(chat=mock)
        req = BackendRequest(Capability.VISION_CHAT, "m", (Message("user", "hi"),), {})
        assert bs.invoke(req).text is not None

    def test_total_inner_calls_deduplicates_shared_backend(self):
        mock = MockBackend()
        bs = BackendSet(chat=mock, vision=mock, embed=MockBackend())
        bs.invoke(chat_request())
        assert bs.total_inner_calls() == 1


class TestCache:
    def test_second_invoke_is_cached_and_counts_freeze(self, tmp_path):
        mock = MockBackend()
        backend = CachingBackend(mock, ResponseCache(tmp_path))
        req = chat_request("anything")
        first = backend.invoke(req)
        second = backend.invoke(req)
        assert not first.cached and second.cached
        assert first.text == second.text
        assert mock.calls == 1

    def test_cache_roundtrips_images_and_embeddings(self, tmp_path):
        cache = ResponseCache(tmp_path)
        t2i = BackendRequest(
            Capability.TEXT_TO_IMAGE, "m", (Message("user", "prompt"),), {"seed": 3, "n": 2}
        )
        backend = CachingBackend(MockBackend(), cache)
        fresh = backend.invoke(t2i)
        warm = backend.invoke(t2i)
        assert warm.cached and warm.images == fresh.images

        emb = BackendRequest(Capability.EMBED, "m", (Message("user", "abc"),), {})
        fresh_e = backend.invoke(emb)
        warm_e = backend.invoke(emb)
        assert warm_e.cached
        assert np.allclose(warm_e.embedding, fresh_e.embedding)

    def test_cache_layout(self, tmp_path):
        backend = CachingBackend(MockBackend(), ResponseCache(tmp_path))
        req = chat_request("layout probe")
        backend.invoke(req)
        key = req.cache_key()
        assert (tmp_path / "chat" / key[:2] / f"{key}.json").is_file()

    def test_torn_entry_treated_as_miss_and_repaired(self, tmp_path):
        backend = CachingBackend(MockBackend(), ResponseCache(tmp_path))
        req = BackendRequest(
            Capability.TEXT_TO_IMAGE, "m", (Message("user", "x"),), {"seed": 1, "n": 1}
        )
        backend.invoke(req)
        key = req.cache_key()
        (tmp_path / "text_to_image" / key[:2] / f"{key}_0.png").unlink()
        assert not backend.invoke(req).cached  # miss re-invokes and rewrites
        assert backend.invoke(req).cached

    def test_determinism_byte_identical_responses(self, tmp_path):
        backend = CachingBackend(MockBackend(seed=5), ResponseCache(tmp_path))
        req = BackendRequest(
            Capability.TEXT_TO_IMAGE, "m", (Message("user", "same"),), {"seed": 9, "n": 1}
        )
        a = backend.invoke(req)
        b = backend.invoke(req)
        assert a.images[0] == b.images[0]


class FakeResponse:
    def __init__(self, status_code=200, doc=None, text="err"):
        self.status_code = status_code
        self._doc = doc or {}
        self.text = text

    def json(self):
        return self._doc


class FakeSession:
    """Scripted transport: pops one behavior per call."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls += 1
        action = self.script.pop(0)
        if isinstance(action, Exception):
            raise action
        return action


def http_backend(script, **kwargs):
    return HttpBackend(
        base_url="http://fake",
        model="m",
        session=FakeSession(script),
        retry=RetryPolicy(attempts=3, backoff_base=0.0),
        sleep=lambda s: None,
        **kwargs,
    )


CHAT_OK = FakeResponse(doc={"choices": [{"message": {"content": "hi"}}], "usage": {"total_tokens": 7}})


class TestHttpRetry:
    def test_unreachable_host_errors_after_exactly_3_attempts(self):
        backend = http_backend([requests.ConnectionError("refused")] * 5)
        with pytest.raises(TransportError):
            backend.invoke(chat_request())
        assert backend.session.calls == 3

    def test_500_retries_then_succeeds(self):
        backend = http_backend([FakeResponse(500), FakeResponse(503), CHAT_OK])
        response = backend.invoke(chat_request())
        assert response.text == "hi"
        assert response.usage == {"total_tokens": 7}
        assert backend.session.calls == 3

    def test_4xx_fails_immediately(self):
        backend = http_backend([FakeResponse(401), CHAT_OK])
        with pytest.raises(HttpStatusError):
            backend.invoke(chat_request())
        assert backend.session.calls == 1

    def test_shape_violation_is_protocol_error(self):
        backend = http_backend([FakeResponse(doc={"choices": []})])
        with pytest.raises(ProtocolError):
            backend.invoke(chat_request())

    def test_backoff_schedule(self):
        sleeps = []
        backend = HttpBackend(
            base_url="http://fake",
            model="m",
            session=FakeSession([FakeResponse(500), FakeResponse(500), CHAT_OK]),
            retry=RetryPolicy(attempts=3, backoff_base=0.5, backoff_factor=4.0),
            sleep=sleeps.append,
        )
        backend.invoke(chat_request())
        assert sleeps == [0.5, 2.0]

    def test_embed_and_images_parsing(self):
        backend = http_backend(
            [FakeResponse(doc={"data": [{"embedding": [0.1, 0.2]}], "usage": {}})]
        )
        req = BackendRequest(Capability.EMBED, "m", (Message("user", "x"),), {})
        assert backend.invoke(req).embedding == (0.1, 0.2)

        import base64

        backend = http_backend(
            [FakeResponse(doc={"data": [{"b64_json": base64.b64encode(b"PNGDATA").decode()}]})]
        )
        req = BackendRequest(Capability.TEXT_TO_IMAGE, "m", (Message("user", "x"),), {"n": 1})
        assert backend.invoke(req).images == (b"PNGDATA",)


class TestRateLimiter:
    def test_acquire_blocks_when_bucket_empty(self):
        clock = {"t": 0.0}
        slept = []

        def sleep(s):
            slept.append(s)
            clock["t"] += s

        limiter = RateLimiter(60, clock=lambda: clock["t"], sleep=sleep)
        limiter.acquire()  # initial token
        limiter.acquire()  # must wait ~1s at 1 req/s
        assert slept and sum(slept) == pytest.approx(1.0, abs=0.01)

    def test_thread_safe_counting(self):
        clock = {"t": 0.0}
        limiter = RateLimiter(6000, clock=lambda: clock["t"], sleep=lambda s: clock.__setitem__("t", clock["t"] + s))
        acquired = []

        def worker():
            for _ in range(5):
                limiter.acquire()
                acquired.append(1)

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(acquired) == 20
