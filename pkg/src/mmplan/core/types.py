"""Domain types for goals, plans, steps, and judge verdicts.

All types are immutable after construction; updates go through
``dataclasses.replace`` so plans can be shared across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any


@dataclass(frozen=True)
class MultimodalGoal:
    """A task goal: the instruction text plus an optional generated goal image."""

    goal_text: str
    task_id: str
    goal_image: str | None = None  # path relative to the run directory

    def __post_init__(self):
        if not self.goal_text.strip():
            raise ValueError("goal_text must be nonempty")
        if not self.task_id:
            raise ValueError("task_id must be nonempty")


@dataclass(frozen=True)
class DescriptionRecord:
    """Structured output of the image-description stage for one step.

    ``image_description`` is the prompt handed to the text-to-image backend;
    the other fields capture the intermediate reasoning blocks (empty for the
    reduced prompt variants).
    """

    image_description: str
    step_detail: str = ""
    before_states: tuple[str, ...] = ()
    after_states: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.image_description.strip():
            raise ValueError("image_description must be nonempty")


@dataclass(frozen=True)
class CandidateImage:
    """One sampled image for a step: sample index k, file reference, and
    (once selection ran) its embedding and similarity to the description."""

    k: int
    image: str  # path relative to the run directory
    embedding: tuple[float, ...] | None = None
    similarity: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("candidate index k is 1-based")
        if self.similarity is not None and not -1.0 - 1e-9 <= self.similarity <= 1.0 + 1e-9:
            raise ValueError(f"similarity out of [-1,1]: {self.similarity}")


@dataclass(frozen=True)
class JudgeVerdict:
    """Parsed judge output: integer score 0..100 plus the explanation."""

    score: int
    explanation: str
    raw: str = ""
    attempts: int = 1

    def __post_init__(self):
        if not 0 <= self.score <= 100:
            raise ValueError(f"score out of range: {self.score}")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


@dataclass(frozen=True)
class PlanStep:
    """One plan step: 1-based index, instruction text, and the per-step
    artifacts produced/attached by later stages."""

    index: int
    text: str
    description: DescriptionRecord | None = None
    candidates: tuple[CandidateImage, ...] = ()
    selected: int | None = None  # k of the chosen candidate
    ca_verdict: JudgeVerdict | None = None
    clip_score: float | None = None

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("step index is 1-based")
        if self.selected is not None:
            if not self.candidates:
                raise ValueError("selected set on a step with no candidates")
            if self.selected not in {c.k for c in self.candidates}:
                raise ValueError(f"selected={self.selected} is not a candidate k")
        if self.clip_score is not None and not 0.0 <= self.clip_score <= 100.0:
            raise ValueError(f"clip_score out of [0,100]: {self.clip_score}")

    def selected_candidate(self) -> CandidateImage | None:
        if self.selected is None:
            return None
        return next(c for c in self.candidates if c.k == self.selected)


@dataclass(frozen=True)
class Plan:
    """A full multimodal plan: goal, ordered steps, plan-level verdict, and
    provenance describing how it was produced."""

    goal: MultimodalGoal
    steps: tuple[PlanStep, ...] = ()
    tplan_verdict: JudgeVerdict | None = None
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for want, step in enumerate(self.steps, start=1):
            if step.index != want:
                raise ValueError(
                    f"step indices must be contiguous 1..n, got {step.index} at position {want}"
                )

    def step_texts(self) -> list[str]:
        return [s.text for s in self.steps]

    def visual_steps(self) -> list[PlanStep]:
        """Steps that carry a selected image."""
        return [s for s in self.steps if s.selected is not None]

    def with_steps(self, steps) -> "Plan":
        return replace(self, steps=tuple(steps))

    def with_tplan_verdict(self, verdict: JudgeVerdict | None) -> "Plan":
        return replace(self, tplan_verdict=verdict)
