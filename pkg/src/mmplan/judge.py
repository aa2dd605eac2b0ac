"""Reference-free plan evaluation.

- Plan-level judge score: one chat call rendering the goal/steps rubric,
  answer parsed as JSON {"score": 0..100, "explanation": ...}.
- Per-step cross-modal score: a two-turn vision conversation (describe the
  image, then score it against the step text); turn 1 is kept fixed across
  turn-2 parse retries because the rubric explicitly scores "according to
  your previous answer".
- Embedding-based score: rescaled non-negative cosine between image and text
  embeddings, min(100, 250 * max(0, cos)).

Judges decode at temperature 0 with a fixed seed. Malformed judge output is
re-prompted up to 3 total attempts before raising VerdictParseError.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backends.base import BackendRequest, BackendSet, Capability, Message
from .core.types import JudgeVerdict, Plan, PlanStep
from .errors import BackendError, VerdictParseError
from .pipeline.templates import TemplateLibrary, TemplateName

JUDGE_ATTEMPTS = 3
_FENCE = re.compile(r"```(?:[A-Za-z0-9_-]+)?\s*(.*?)```", re.DOTALL)


def _balanced_regions(text: str):
    """Yield balanced {...} substrings, tracking JSON string literals so
    braces inside explanations don't end a region early."""
    depth = 0
    start = None
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if escaped:
            escaped = False
            continue
        if in_string:
            if ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start : i + 1]


def _coerce_score(value) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return int(round(value))
    if isinstance(value, str):
        try:
            return int(round(float(value.strip())))
        except ValueError:
            return None
    return None


def extract_verdict(raw: str, attempt: int = 1) -> JudgeVerdict:
    """Parse a judge response: strip code fences, take the first balanced
    JSON object carrying a usable "score" key, coerce and clamp the score."""
    sources = [m for m in _FENCE.findall(raw)] + [raw]
    for source in sources:
        for region in _balanced_regions(source):
            try:
                doc = json.loads(region)
            except json.JSONDecodeError:
                continue
            if not isinstance(doc, dict) or "score" not in doc:
                continue
            score = _coerce_score(doc["score"])
            if score is None:
                continue
            clamped = min(100, max(0, score))
            annotated = raw
            if clamped != score:
                annotated = f"{raw}\n[score clamped from {score} to {clamped}]"
            return JudgeVerdict(
                score=clamped,
                explanation=str(doc.get("explanation", "")),
                raw=annotated,
                attempts=attempt,
            )
    raise VerdictParseError(f"no parseable score JSON in judge output: {raw[:120]!r}")


def _judge_params(seed: int, attempt: int) -> dict:
    params = {"temperature": 0.0, "max_tokens": 512, "seed": seed}
    if attempt > 1:
        params["attempt"] = attempt
    return params


def tplan_score(
    goal_text: str,
    step_texts: list[str],
    backends: BackendSet,
    templates: TemplateLibrary,
    seed: int = 0,
    attempts: int = JUDGE_ATTEMPTS,
) -> JudgeVerdict:
    """Judge how well the numbered step list accomplishes the goal."""
    if not step_texts:
        raise ValueError("tplan_score needs at least one step")
    steps_block = "\n".join(f"{i}. {t}" for i, t in enumerate(step_texts, start=1))
    prompt = templates.get(TemplateName.TPLAN_JUDGE).render(goal=goal_text, steps=steps_block)
    last_error: VerdictParseError | None = None
    for attempt in range(1, attempts + 1):
        request = BackendRequest(
            capability=Capability.CHAT,
            model=backends.models.get("chat", ""),
            messages=(Message(role="user", text=prompt),),
            params=_judge_params(seed, attempt),
        )
        response = backends.invoke(request)
        try:
            return extract_verdict(response.text or "", attempt=attempt)
        except VerdictParseError as exc:
            last_error = exc
    raise last_error


def ca_score(
    step_text: str,
    goal_text: str,
    image_bytes: bytes,
    backends: BackendSet,
    templates: TemplateLibrary,
    seed: int = 0,
    attempts: int = JUDGE_ATTEMPTS,
) -> JudgeVerdict:
    """Two-turn cross-modal alignment judge for one step image.

    Turn 1 asks for a description of the image; turn 2 scores the image
    against the step text with the turn-1 answer as assistant context. The
    image is re-attached in turn 2 so the conversation is self-contained.
    """
    model = backends.models.get("vision", backends.models.get("chat", ""))
    describe_prompt = templates.get(TemplateName.CA_DESCRIBE).render()
    turn1 = BackendRequest(
        capability=Capability.VISION_CHAT,
        model=model,
        messages=(Message(role="user", text=describe_prompt, images=(image_bytes,)),),
        params=_judge_params(seed, 1),
    )
    described = backends.invoke(turn1).text or ""

    score_prompt = templates.get(TemplateName.CA_SCORE).render(step=step_text, goal=goal_text)
    last_error: VerdictParseError | None = None
    for attempt in range(1, attempts + 1):
        turn2 = BackendRequest(
            capability=Capability.VISION_CHAT,
            model=model,
            messages=(
                Message(role="user", text=describe_prompt, images=(image_bytes,)),
                Message(role="assistant", text=described),
                Message(role="user", text=score_prompt, images=(image_bytes,)),
            ),
            params=_judge_params(seed, attempt),
        )
        response = backends.invoke(turn2)
        try:
            return extract_verdict(response.text or "", attempt=attempt)
        except VerdictParseError as exc:
            last_error = exc
    raise last_error


def clip_score(image_embedding, text_embedding) -> float:
    """min(100, 100 * 2.5 * max(0, cosine)).

    Vectors are reduced to a canonical scale (divided by their max absolute
    component) before the cosine, so rescaling either argument by an exact
    factor cannot change the result.
    """
    a = np.asarray(image_embedding, dtype=np.float64)
    b = np.asarray(text_embedding, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding shape mismatch: {a.shape} vs {b.shape}")
    amax = float(np.max(np.abs(a)))
    bmax = float(np.max(np.abs(b)))
    if amax == 0.0 or bmax == 0.0:
        raise ValueError("clip_score is undefined for zero vectors")
    a = a / amax
    b = b / bmax
    cosine = float(a @ b) / float(np.sqrt(float(a @ a) * float(b @ b)))
    return min(100.0, 100.0 * 2.5 * max(0.0, cosine))


# ---------------------------------------------------------------------------
# plan-level helpers


def evaluate_plan_text(plan: Plan, backends: BackendSet, templates: TemplateLibrary, seed: int = 0) -> Plan:
    verdict = tplan_score(plan.goal.goal_text, plan.step_texts(), backends, templates, seed=seed)
    return plan.with_tplan_verdict(verdict)


def _embed_for_clip(backends: BackendSet, text: str = "", image: bytes | None = None):
    message = Message(role="user", text=text, images=(image,) if image is not None else ())
    request = BackendRequest(
        capability=Capability.EMBED,
        model=backends.models.get("embed", ""),
        messages=(message,),
        params={},
    )
    return backends.invoke(request).embedding


def evaluate_plan_alignment(
    plan: Plan,
    run_dir: Path,
    backends: BackendSet,
    templates: TemplateLibrary,
    metrics: tuple[str, ...] = ("ca", "clip"),
    seed: int = 0,
) -> tuple[Plan, list[str]]:
    """Score every step that has a selected image; judge failures leave that
    step's score absent and are reported, never fatal."""
    run_dir = Path(run_dir)
    issues: list[str] = []
    new_steps: list[PlanStep] = []
    for step in plan.steps:
        chosen = step.selected_candidate()
        if chosen is None:
            new_steps.append(step)
            continue
        image_path = run_dir / chosen.image
        if not image_path.is_file():
            issues.append(f"step {step.index}: image missing: {chosen.image}")
            new_steps.append(step)
            continue
        blob = image_path.read_bytes()
        updated = step
        if "ca" in metrics:
            try:
                verdict = ca_score(step.text, plan.goal.goal_text, blob, backends, templates, seed=seed)
                updated = replace(updated, ca_verdict=verdict)
            except (BackendError, VerdictParseError) as exc:
                issues.append(f"step {step.index}: ca judge failed: {exc}")
        if "clip" in metrics:
            try:
                img_emb = _embed_for_clip(backends, image=blob)
                txt_emb = _embed_for_clip(backends, text=step.text)
                updated = replace(updated, clip_score=clip_score(img_emb, txt_emb))
            except (BackendError, ValueError) as exc:
                issues.append(f"step {step.index}: clip scoring failed: {exc}")
        new_steps.append(updated)
    return plan.with_steps(new_steps), issues


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class TaskAggregate:
    task_id: str
    mean: float | None
    scored: int
    absent: int


@dataclass(frozen=True)
class AggregateSummary:
    tasks: tuple[TaskAggregate, ...]
    corpus_mean: float
    absent_total: int


def aggregate_scores(per_task: dict[str, list[float | None]]) -> AggregateSummary:
    """Mean over steps within a task, then mean over tasks; absent scores are
    excluded and counted."""
    rows = []
    absent_total = 0
    for task_id, scores in per_task.items():
        present = [s for s in scores if s is not None]
        absent = len(scores) - len(present)
        absent_total += absent
        mean = sum(present) / len(present) if present else None
        rows.append(TaskAggregate(task_id=task_id, mean=mean, scored=len(present), absent=absent))
    task_means = [r.mean for r in rows if r.mean is not None]
    if not task_means:
        raise ValueError("all scores absent; nothing to aggregate")
    return AggregateSummary(
        tasks=tuple(rows),
        corpus_mean=sum(task_means) / len(task_means),
        absent_total=absent_total,
    )
