"""The generation pipeline: visual goal, textual plan, per-step image
descriptions with object-state reasoning, K-sample image generation, and
cross-modal selection of the best candidate per step.

Steps are processed in order because step i's description prompt consumes the
texts of steps < i (capped to the 10 most recent).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..backends.base import BackendRequest, BackendSet, Capability, Message
from ..core.serialization import (
    GOAL_IMAGE,
    RunManifest,
    atomic_write_bytes,
    load_manifest,
    save_plan,
    step_image_name,
    utc_now,
    write_manifest,
)
from ..core.types import CandidateImage, DescriptionRecord, MultimodalGoal, Plan, PlanStep
from ..errors import BackendError, ConfigError, PipelineError
from .templates import TemplateLibrary, TemplateName

PREV_STEPS_CAP = 10
EMPTY_PREV_BLOCK = "(none)"
STAGES = ("text", "describe", "images", "select")
_STAGE_NEEDS = {"describe": "text", "images": "describe", "select": "images"}

_STEP_LINE = re.compile(r"^\s*(\d+)[.)]\s+(.*)$")


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 20
    variant: str = "osrcot"
    stages: tuple[str, ...] = STAGES
    goal_image: bool = True
    seed: int = 0
    temperature: float = 0.7
    max_tokens: int = 512
    image_size: tuple[int, int] = (512, 512)
    attempts: int = 3

    def __post_init__(self):
        if not 1 <= self.k <= 64:
            raise ConfigError(f"k must be in 1..64, got {self.k}")
        stages = set(self.stages)
        unknown = stages - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stages: {sorted(unknown)}")
        for stage, needs in _STAGE_NEEDS.items():
            if stage in stages and needs not in stages:
                raise ConfigError(f"stage '{stage}' requires stage '{needs}'")

    def snapshot(self) -> dict:
        return {
            "k": self.k,
            "variant": self.variant,
            "stages": sorted(self.stages),
            "goal_image": self.goal_image,
            "seed": self.seed,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "image_size": list(self.image_size),
        }


def parse_numbered_steps(text: str) -> tuple[list[str], list[str]]:
    """Parse "1. ..." lines into step texts.

    Leading prose before the first numbered line is dropped; unnumbered lines
    after a step attach to it; skipped or repeated numbers are renumbered
    contiguously, recorded as a normalization event.
    """
    parts: list[tuple[int, list[str]]] = []
    for line in text.splitlines():
        m = _STEP_LINE.match(line)
        if m:
            parts.append((int(m.group(1)), [m.group(2).strip()]))
        elif parts and line.strip():
            parts[-1][1].append(line.strip())
    texts = [" ".join(body) for _, body in parts]
    events = []
    numbers = [n for n, _ in parts]
    if texts and numbers != list(range(1, len(texts) + 1)):
        events.append(f"renumbered steps: model emitted {numbers}")
    return texts, events


def render_prev_block(prev_steps: list[str], first_index: int = 1) -> str:
    """The [prev_steps] binding: the most recent PREV_STEPS_CAP steps as
    numbered lines keeping their original indices."""
    capped = prev_steps[-PREV_STEPS_CAP:]
    start = first_index + (len(prev_steps) - len(capped))
    if not capped:
        return EMPTY_PREV_BLOCK
    return "\n".join(f"{i}. {t}" for i, t in enumerate(capped, start=start))


def _split_blocks(text: str) -> dict[str, list[str]]:
    """Locate the reasoning blocks by trimmed, case-insensitive headers."""
    blocks: dict[str, list[str]] = {}
    current: str | None = None
    for raw_line in text.splitlines():
        line = raw_line.strip()
        low = line.lower()
        header = None
        for name in ("image description", "description", "before", "after"):
            if low.startswith(name + ":"):
                header = name
                line = line[len(name) + 1 :].strip()
                break
        if header is not None:
            current = header
            blocks.setdefault(current, [])
            if line:
                blocks[current].append(line)
        elif current is not None and line:
            blocks[current].append(line)
    return blocks


def _state_entries(lines: list[str]) -> tuple[str, ...]:
    return tuple(re.sub(r"^[-*•]\s*", "", line).strip() for line in lines if line.strip())


def parse_description(text: str, variant: str) -> DescriptionRecord | None:
    """Parse a description response per variant. None means "retry"."""
    blocks = _split_blocks(text)
    image_desc = " ".join(blocks.get("image description", [])).strip()

    if variant in ("v1", "v2"):
        if not image_desc:
            body = re.sub(r"^\s*Answer:\s*", "", text.strip(), flags=re.IGNORECASE).strip()
            image_desc = body
        if not image_desc:
            return None
        return DescriptionRecord(image_description=image_desc)

    detail = " ".join(blocks.get("description", [])).strip()
    if variant == "v3":
        if not image_desc or not detail:
            return None
        return DescriptionRecord(image_description=image_desc, step_detail=detail)

    before = _state_entries(blocks.get("before", []))
    after = _state_entries(blocks.get("after", []))
    if not image_desc or not before or not after:
        return None
    return DescriptionRecord(
        image_description=image_desc,
        step_detail=detail,
        before_states=before,
        after_states=after,
    )


@dataclass
class Planner:
    backends: BackendSet
    templates: TemplateLibrary
    run_dir: Path
    config: PipelineConfig = field(default_factory=PipelineConfig)
    events: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)

    # -- request helpers ------------------------------------------------------

    def _model(self, role: str) -> str:
        return self.backends.models.get(role, "") if hasattr(self.backends, "models") else ""

    def _chat_params(self, attempt: int = 1) -> dict:
        params = {
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "seed": self.config.seed,
        }
        if attempt > 1:
            params["attempt"] = attempt
        return params

    # -- stages ---------------------------------------------------------------

    def generate_visual_goal(self, goal_text: str) -> str | None:
        """Generate the goal image; failures degrade to a text-only goal."""
        request = BackendRequest(
            capability=Capability.TEXT_TO_IMAGE,
            model=self._model("t2i"),
            messages=(Message(role="user", text=goal_text),),
            params={"seed": self.config.seed, "n": 1, "image_size": list(self.config.image_size)},
        )
        try:
            response = self.backends.invoke(request)
        except BackendError as exc:
            self.events.append(f"goal image generation failed, continuing without: {exc}")
            return None
        atomic_write_bytes(self.run_dir / GOAL_IMAGE, response.images[0])
        return GOAL_IMAGE

    def generate_textual_plan(self, goal: MultimodalGoal) -> list[str]:
        template = self.templates.get(TemplateName.PLAN_GEN)
        prompt = template.render(goal=goal.goal_text)
        images: tuple[bytes, ...] = ()
        if goal.goal_image:
            path = self.run_dir / goal.goal_image
            if path.is_file():
                images = (path.read_bytes(),)
        capability = Capability.VISION_CHAT if images else Capability.CHAT
        role = "vision" if images else "chat"

        for attempt in range(1, self.config.attempts + 1):
            request = BackendRequest(
                capability=capability,
                model=self._model(role),
                messages=(Message(role="user", text=prompt, images=images),),
                params=self._chat_params(attempt),
            )
            response = self.backends.invoke(request)
            texts, events = parse_numbered_steps(response.text or "")
            if texts:
                self.events.extend(events)
                for i, text in enumerate(texts, start=1):
                    words = len(text.split())
                    if words > 50:  # the prompt asks for <= 50 words; record, don't truncate
                        self.events.append(f"step {i} exceeds 50 words ({words})")
                return texts
        raise PipelineError(f"no parseable steps after {self.config.attempts} attempts")

    def generate_image_description(
        self,
        goal: MultimodalGoal,
        step_text: str,
        prev_steps: list[str],
        variant: str | None = None,
    ) -> DescriptionRecord:
        variant = variant or self.config.variant
        template = self.templates.for_variant(variant)
        prompt = template.render(
            goal=goal.goal_text,
            step=step_text,
            prev_steps=render_prev_block(prev_steps),
        )
        for attempt in range(1, self.config.attempts + 1):
            request = BackendRequest(
                capability=Capability.CHAT,
                model=self._model("chat"),
                messages=(Message(role="user", text=prompt),),
                params=self._chat_params(attempt),
            )
            response = self.backends.invoke(request)
            record = parse_description(response.text or "", variant)
            if record is not None:
                return record
        self.events.append(f"description parse failed for step {step_text[:40]!r}; using raw step text")
        return DescriptionRecord(image_description=step_text)

    def sample_step_images(self, step_index: int, description: DescriptionRecord) -> list[CandidateImage]:
        candidates = []
        for k in range(1, self.config.k + 1):
            blob = None
            for _ in range(2):  # one retry per sample
                request = BackendRequest(
                    capability=Capability.TEXT_TO_IMAGE,
                    model=self._model("t2i"),
                    messages=(Message(role="user", text=description.image_description),),
                    params={
                        "seed": self.config.seed + k,
                        "n": 1,
                        "image_size": list(self.config.image_size),
                    },
                )
                try:
                    blob = self.backends.invoke(request).images[0]
                    break
                except BackendError:
                    continue
            if blob is None:
                self.events.append(f"step {step_index}: candidate {k} dropped after retry")
                continue
            rel = step_image_name(step_index, k)
            atomic_write_bytes(self.run_dir / rel, blob)
            candidates.append(CandidateImage(k=k, image=rel))
        if not candidates:
            raise PipelineError(f"step {step_index}: no image candidates survived")
        return candidates

    def _embed(self, text: str = "", image: bytes | None = None) -> np.ndarray | None:
        message = Message(role="user", text=text, images=(image,) if image is not None else ())
        request = BackendRequest(
            capability=Capability.EMBED,
            model=self._model("embed"),
            messages=(message,),
            params={},
        )
        try:
            vec = np.asarray(self.backends.invoke(request).embedding, dtype=np.float64)
        except BackendError:
            return None
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            return None
        return vec / norm

    def select_step_image(
        self, candidates: list[CandidateImage], description: DescriptionRecord
    ) -> tuple[int, list[CandidateImage]]:
        """Pick argmax cosine(candidate embedding, description embedding).

        Returns the selected candidate's k and the candidates with their
        embeddings and similarities recorded. Ties break to the lowest k;
        candidates whose embedding fails are excluded from the argmax.
        """
        if not candidates:
            raise ValueError("candidates must be nonempty")
        desc_vec = self._embed(text=description.image_description)
        if desc_vec is None:
            self.events.append("description embedding failed; selecting first candidate")
            return candidates[0].k, list(candidates)

        scored: list[CandidateImage] = []
        best_k = None
        best_sim = -np.inf
        for cand in candidates:
            blob = (self.run_dir / cand.image).read_bytes()
            vec = self._embed(image=blob)
            if vec is None:
                self.events.append(f"candidate {cand.k}: embedding failed, excluded from selection")
                scored.append(cand)
                continue
            sim = float(np.clip(vec @ desc_vec, -1.0, 1.0))
            scored.append(replace(cand, embedding=tuple(vec.tolist()), similarity=sim))
            if sim > best_sim:
                best_sim = sim
                best_k = cand.k
        if best_k is None:
            self.events.append("all candidate embeddings failed; selecting first candidate")
            best_k = candidates[0].k
        return best_k, scored

    # -- end to end -----------------------------------------------------------

    def run(self, goal: MultimodalGoal) -> Plan:
        cfg = self.config
        stages = set(cfg.stages)
        calls_before = self.backends.total_inner_calls()

        if cfg.goal_image and self.backends.t2i is not None:
            rel = self.generate_visual_goal(goal.goal_text)
            if rel is not None:
                goal = replace(goal, goal_image=rel)

        steps: list[PlanStep] = []
        if "text" in stages:
            texts = self.generate_textual_plan(goal)
            for i, text in enumerate(texts, start=1):
                step = PlanStep(index=i, text=text)
                if "describe" in stages:
                    record = self.generate_image_description(goal, text, texts[: i - 1])
                    step = replace(step, description=record)
                    if "images" in stages:
                        candidates = self.sample_step_images(i, record)
                        if "select" in stages:
                            selected, candidates = self.select_step_image(candidates, record)
                            step = replace(step, candidates=tuple(candidates), selected=selected)
                        else:
                            step = replace(step, candidates=tuple(candidates))
                steps.append(step)

        plan = Plan(
            goal=goal,
            steps=tuple(steps),
            provenance={
                "run_id": f"{goal.task_id}-s{cfg.seed}",
                "seed": cfg.seed,
                "config": cfg.snapshot(),
                "models": dict(getattr(self.backends, "models", {})),
                "events": list(self.events),
                "stages_completed": sorted(stages),
            },
        )
        save_plan(plan, self.run_dir)

        manifest = load_manifest(self.run_dir) or RunManifest(run_id=self.run_dir.name)
        manifest.seed = cfg.seed
        manifest.config = cfg.snapshot()
        manifest.models = dict(getattr(self.backends, "models", {}))
        manifest.events = list(self.events)
        manifest.backend_calls = {"total": self.backends.total_inner_calls() - calls_before}
        manifest.status = "plan_complete"  # the corpus runner upgrades to "complete" after evals
        manifest.completed_at = utc_now()
        write_manifest(self.run_dir, manifest)
        return plan
