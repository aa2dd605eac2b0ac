"""Deterministic offline stand-ins for the four model capabilities.

The mock chat model classifies the incoming prompt by the fixed markers of
the shipped templates and answers with content that is a pure function of
(request, seed): plan prompts get a numbered step list built from goal
tokens, description prompts get the structured reasoning blocks, judge
prompts get a JSON score computed from token overlap. Mock images are 64x64
PNGs whose pixels derive from the prompt hash and that carry the generating
prompt in a "provenance" text chunk, which is how the mock embedder can
"see" image content.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import random
import re
import threading

import numpy as np
from PIL import Image, PngImagePlugin

from .base import BackendRequest, BackendResponse, Capability

EMBED_DIM = 64

_STOPWORDS = frozenset(
    "a an and are for how in is of on or the to with".split()
)

# Prompt-class markers; these phrases appear verbatim in the shipped templates.
PLAN_MARKER = "give step-by-step brief instructions"
TPLAN_MARKER = "evaluating the alignment"
CA_DESCRIBE_MARKER = "Briefly describe the image within 50 words"
CA_SCORE_MARKER = "According to the image and your previous answer"
OSR_FULL_MARKER = "describe the state changes of objects"
OSR_V3_MARKER = "First, describe details of"
OSR_V2_MARKER = "containing the 3 sentences after [step]"
OSR_V1_MARKER = "Focus on the items and their physical states"

_VERBS = (
    "Gather", "Prepare", "Combine", "Arrange", "Heat",
    "Mix", "Shape", "Check", "Adjust", "Finish",
)
_FILLERS = ("carefully", "evenly", "slowly", "gently", "thoroughly")


def tokens(text: str) -> list[str]:
    """Lowercased word tokens, keeping duplicates out and order stable."""
    seen: dict[str, None] = {}
    for w in re.findall(r"[0-9A-Za-z]+", text.lower()):
        seen.setdefault(w, None)
    return list(seen)


def salient_tokens(text: str) -> list[str]:
    """Content words: length >= 3, not in the tiny stopword list."""
    return [w for w in tokens(text) if len(w) >= 3 and w not in _STOPWORDS]


def _overlap_score(target: list[str], source: list[str]) -> int:
    if not target:
        return 0
    hit = len(set(target) & set(source))
    return max(0, min(100, round(100 * hit / len(target))))


# ---------------------------------------------------------------------------
# mock embedder


def _bucket(gram: str, dim: int) -> int:
    digest = hashlib.sha256(gram.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dim


def embed_text(text: str, dim: int = EMBED_DIM) -> tuple[float, ...]:
    """Bag of hashed character 3-grams, L2-normalized.

    The empty input maps to the canonical basis vector e1.
    """
    v = np.zeros(dim, dtype=np.float64)
    if not text:
        v[0] = 1.0
        return tuple(v.tolist())
    grams = [text[i : i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else [text]
    for g in grams:
        v[_bucket(g, dim)] += 1.0
    v /= np.linalg.norm(v)
    return tuple(v.tolist())


# ---------------------------------------------------------------------------
# mock images


def build_mock_png(prompt: str, seed: int) -> bytes:
    """64x64 RGB PNG; pixels are a pure function of (prompt, seed), and the
    prompt is stored in an iTXt chunk keyed "provenance"."""
    digest = hashlib.sha256(f"{prompt}|{seed}".encode("utf-8")).digest()
    rng = random.Random(digest)
    img = Image.frombytes("RGB", (64, 64), rng.randbytes(64 * 64 * 3))
    info = PngImagePlugin.PngInfo()
    info.add_itxt("provenance", prompt, lang="", tkey="")
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def read_provenance(png_bytes: bytes) -> str | None:
    try:
        with Image.open(io.BytesIO(png_bytes)) as im:
            im.load()
            value = im.text.get("provenance")
    except Exception:
        return None
    return str(value) if value is not None else None


# ---------------------------------------------------------------------------
# mock chat content


def _last_match(pattern: str, text: str) -> str | None:
    found = re.findall(pattern, text, flags=re.DOTALL)
    return found[-1].strip() if found else None


def _strip_leading_number(step: str) -> str:
    return re.sub(r"^\s*\d+[.)]\s*", "", step).strip()


def mock_plan_text(goal: str, seed: int) -> str:
    toks = salient_tokens(goal) or ["task"]
    n = min(10, max(3, math.ceil(len(goal) / 8)))
    rng = random.Random(f"{seed}:plan:{goal}")
    lines = []
    for i in range(1, n + 1):
        a = toks[(2 * (i - 1)) % len(toks)]
        b = toks[(2 * (i - 1) + 1) % len(toks)]
        verb = _VERBS[(i - 1) % len(_VERBS)]
        lines.append(f"{i}. {verb} the {a} and {b} {rng.choice(_FILLERS)}.")
    return "\n".join(lines)


def mock_description_text(variant: str, step: str, prev_block: str, seed: int) -> str:
    stoks = salient_tokens(step) or ["item"]
    prev_clean = "" if prev_block.strip() in ("", "(none)") else prev_block
    ptoks = salient_tokens(prev_clean)
    rng = random.Random(f"{seed}:osr:{step}")
    desc_tokens = list(stoks)
    if ptoks:
        desc_tokens.append(rng.choice(ptoks))
    image_desc = " ".join(desc_tokens)
    detail = f"Performing the step: {_strip_leading_number(step)}"
    before = [f"- The {t} is not yet handled." for t in stoks[:2]]
    after = [f"- The {t} shows the completed step." for t in stoks[:2]]

    if variant == "v1":
        return image_desc
    if variant == "v2":
        return f"Image Description: {image_desc}"
    if variant == "v3":
        return f"Description: {detail}\nImage Description: {image_desc}"
    return "\n".join(
        [f"Description: {detail}", "Before:", *before, "After:", *after, f"Image Description: {image_desc}"]
    )


def _judge_json(score: int, explanation: str) -> str:
    return json.dumps({"score": score, "explanation": explanation})


class MockBackend:
    """Pure-function backend for all four capabilities.

    ``calls`` counts actual invocations so tests can assert that a warm cache
    performs zero model calls.
    """

    def __init__(self, seed: int = 0, embed_dim: int = EMBED_DIM):
        self.seed = seed
        self.embed_dim = embed_dim
        self.calls = 0
        self._calls_lock = threading.Lock()

    def invoke(self, request: BackendRequest) -> BackendResponse:
        with self._calls_lock:
            self.calls += 1
        cap = request.capability
        if cap in (Capability.CHAT, Capability.VISION_CHAT):
            return self._chat(request)
        if cap is Capability.TEXT_TO_IMAGE:
            return self._t2i(request)
        if cap is Capability.EMBED:
            return self._embed(request)
        raise ValueError(f"unsupported capability: {cap}")  # pragma: no cover

    def _effective_seed(self, request: BackendRequest) -> int:
        s = request.params.get("seed")
        return int(s) if s is not None else self.seed

    # -- chat ---------------------------------------------------------------

    def _chat(self, request: BackendRequest) -> BackendResponse:
        prompt = request.last_user_text()
        seed = self._effective_seed(request)
        meta: dict = {}

        if CA_SCORE_MARKER in prompt:
            text = self._ca_score(request, prompt)
        elif CA_DESCRIBE_MARKER in prompt:
            text, meta = self._ca_describe(request)
        elif TPLAN_MARKER in prompt:
            text = self._tplan(prompt)
        elif PLAN_MARKER in prompt:
            goal = _last_match(r'goal\s*\n?\s*"(.*?)",\s*give step-by-step', prompt) or ""
            text = mock_plan_text(goal, seed)
        elif OSR_FULL_MARKER in prompt:
            text = self._osr(prompt, "full", seed)
        elif OSR_V3_MARKER in prompt:
            text = self._osr(prompt, "v3", seed)
        elif OSR_V2_MARKER in prompt:
            text = self._osr(prompt, "v2", seed)
        elif OSR_V1_MARKER in prompt:
            text = self._osr_v1(prompt, seed)
        else:
            text = f"ECHO: {prompt[:200]}"
            meta = {"fallback": True}

        usage = {"prompt_tokens": len(prompt) // 4, "completion_tokens": len(text) // 4}
        return BackendResponse(text=text, usage=usage, meta=meta)

    def _osr(self, prompt: str, variant: str, seed: int) -> str:
        step = _last_match(r"\n\[step\]:(.*?)\n\[prev_steps\]:", prompt) or ""
        prev = _last_match(r"\n\[prev_steps\]:(.*?)\n(?:Image )?Description:", prompt) or ""
        return mock_description_text(variant, step, prev, seed)

    def _osr_v1(self, prompt: str, seed: int) -> str:
        step = _last_match(r"current step is\s*(.*?)\s*\nThe previous steps are:", prompt) or ""
        prev = _last_match(r"The previous steps are:\n(.*?)\nDescribe an image", prompt) or ""
        return mock_description_text("v1", step, prev, seed)

    def _tplan(self, prompt: str) -> str:
        goal = _last_match(r"\n\[goal\]:(.*?)\n\[steps\]:", prompt) or ""
        steps = _last_match(r"\n\[steps\]:(.*?)\nEvaluate how well", prompt) or ""
        score = _overlap_score(tokens(goal), tokens(steps))
        return _judge_json(score, f"token overlap of goal vs steps is {score}%")

    def _ca_describe(self, request: BackendRequest) -> tuple[str, dict]:
        for blob in request.all_images():
            prov = read_provenance(blob)
            if prov is not None:
                return f"The image shows: {prov}", {}
        return "The image content is unavailable.", {"fallback": True}

    def _ca_score(self, request: BackendRequest, prompt: str) -> str:
        step = _last_match(r"describes action in\s*step:\s*(.*?), a subprocess of the task", prompt) or ""
        source = request.last_assistant_text()
        if not source:
            for blob in request.all_images():
                prov = read_provenance(blob)
                if prov is not None:
                    source = prov
                    break
        score = _overlap_score(tokens(step), tokens(source))
        return _judge_json(score, f"step/image token overlap is {score}%")

    # -- images -------------------------------------------------------------

    def _t2i(self, request: BackendRequest) -> BackendResponse:
        prompt = request.last_user_text()
        seed = self._effective_seed(request)
        n = int(request.params.get("n", 1))
        images = tuple(build_mock_png(prompt, seed + j) for j in range(n))
        return BackendResponse(images=images, usage={"prompt_tokens": len(prompt) // 4})

    # -- embeddings ---------------------------------------------------------

    def _embed(self, request: BackendRequest) -> BackendResponse:
        meta: dict = {}
        blobs = request.all_images()
        if blobs:
            prov = read_provenance(blobs[0])
            if prov is None:
                prov = ""
                meta = {"fallback": True}
            vec = embed_text(prov, self.embed_dim)
        else:
            vec = embed_text(request.last_user_text(), self.embed_dim)
        return BackendResponse(embedding=vec, usage={}, meta=meta)
