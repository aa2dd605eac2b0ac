"""Corpus batch runner: one run directory per task, isolated failures,
manifest-based resume, and a corpus summary (summary.json + summary.csv).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import AppConfig, build_backends
from .core.serialization import (
    SCORES_FILE,
    atomic_write_text,
    dump_json,
    load_manifest,
    load_plan,
    save_plan,
    utc_now,
    write_manifest,
)
from .core.types import MultimodalGoal, Plan
from .errors import BackendError, MMPlanError, VerdictParseError
from .judge import evaluate_plan_alignment, evaluate_plan_text
from .ordering import evaluate_ordering, make_sequencer
from .pipeline.planner import PipelineConfig, Planner
from .pipeline.templates import TemplateLibrary, TemplateName

log = logging.getLogger("mmplan")

SUMMARY_COLUMNS = (
    "task_id",
    "n_steps",
    "tplan",
    "ca_mean",
    "clip_mean",
    "acc",
    "dist",
    "ms",
    "wms",
    "lcs",
    "tau",
)
DEFAULT_EVALS = ("text", "ca", "clip", "order")


@dataclass
class TaskOutcome:
    task_id: str
    status: str  # ok | skipped | failed | dry
    row: dict | None = None
    error: str | None = None


@dataclass
class CorpusResult:
    outcomes: list[TaskOutcome]

    @property
    def failed(self) -> list[TaskOutcome]:
        return [o for o in self.outcomes if o.status == "failed"]


def pipeline_config(cfg: AppConfig) -> PipelineConfig:
    return PipelineConfig(
        k=cfg.k,
        variant=cfg.variant,
        stages=cfg.stages,
        goal_image=cfg.goal_image,
        seed=cfg.seed,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
        image_size=cfg.image_size,
    )


def _summary_row(plan: Plan, scores: dict) -> dict:
    ca_values = [s["ca"] for s in scores.get("steps", []) if s.get("ca") is not None]
    clip_values = [s["clip"] for s in scores.get("steps", []) if s.get("clip") is not None]
    metrics = (scores.get("ordering") or {}).get("metrics") or {}
    tplan = (scores.get("tplan") or {}).get("score")
    return {
        "task_id": plan.goal.task_id,
        "n_steps": len(plan.steps),
        "tplan": tplan,
        "ca_mean": sum(ca_values) / len(ca_values) if ca_values else None,
        "clip_mean": sum(clip_values) / len(clip_values) if clip_values else None,
        "acc": metrics.get("acc"),
        "dist": metrics.get("dist"),
        "ms": metrics.get("ms"),
        "wms": metrics.get("wms"),
        "lcs": metrics.get("lcs"),
        "tau": metrics.get("tau"),
    }


def run_task(
    goal: MultimodalGoal,
    run_dir: Path,
    cfg: AppConfig,
    backends,
    templates: TemplateLibrary,
    evals=DEFAULT_EVALS,
) -> dict:
    """Generate a plan and run the requested evaluations; returns the summary row."""
    planner = Planner(backends=backends, templates=templates, run_dir=run_dir, config=pipeline_config(cfg))
    plan = planner.run(goal)

    scores: dict = {"steps": [], "issues": []}
    if "text" in evals and plan.steps:
        try:
            plan = evaluate_plan_text(plan, backends, templates, seed=cfg.seed)
            scores["tplan"] = {
                "score": plan.tplan_verdict.score,
                "explanation": plan.tplan_verdict.explanation,
            }
        except (BackendError, VerdictParseError) as exc:
            scores["issues"].append(f"tplan judge failed: {exc}")  # score stays absent
    align_metrics = tuple(m for m in ("ca", "clip") if m in evals)
    if align_metrics and plan.visual_steps():
        plan, issues = evaluate_plan_alignment(plan, run_dir, backends, templates, align_metrics, seed=cfg.seed)
        scores["issues"].extend(issues)
    scores["steps"] = [
        {
            "index": s.index,
            "ca": s.ca_verdict.score if s.ca_verdict else None,
            "clip": s.clip_score,
        }
        for s in plan.steps
    ]
    if "order" in evals and len(plan.visual_steps()) >= 2:
        sequencer = make_sequencer(cfg.sequencer, seed=cfg.seed)
        result = evaluate_ordering(plan, sequencer, seed=cfg.seed, run_dir=run_dir)
        scores["ordering"] = result.as_dict()

    atomic_write_text(run_dir / SCORES_FILE, dump_json(scores))
    save_plan(plan, run_dir)
    manifest = load_manifest(run_dir)
    manifest.status = "complete"
    manifest.completed_at = utc_now()
    write_manifest(run_dir, manifest)
    return _summary_row(plan, scores)


def _row_from_disk(run_dir: Path) -> dict:
    plan = load_plan(run_dir)
    scores_path = run_dir / SCORES_FILE
    scores = json.loads(scores_path.read_text(encoding="utf-8")) if scores_path.is_file() else {}
    return _summary_row(plan, scores)


def run_corpus(
    dataset_pairs,
    out_dir: Path,
    cfg: AppConfig,
    evals=DEFAULT_EVALS,
    dry_run: bool = False,
    resume: bool = True,
    workers: int | None = None,
) -> CorpusResult:
    """Run every task, isolating failures. Tasks whose manifest says
    "complete" are skipped (their rows are rebuilt from disk)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backends = build_backends(cfg)
    templates = TemplateLibrary(Path(cfg.templates_dir) if cfg.templates_dir else None)

    if dry_run:
        outcomes = []
        plan_template = templates.get(TemplateName.PLAN_GEN)
        for goal, _reference in dataset_pairs:
            prompt_dir = out_dir / goal.task_id / "prompts"
            atomic_write_text(prompt_dir / "plan_gen.txt", plan_template.render(goal=goal.goal_text))
            outcomes.append(TaskOutcome(task_id=goal.task_id, status="dry"))
        return CorpusResult(outcomes=outcomes)

    def one(goal: MultimodalGoal) -> TaskOutcome:
        run_dir = out_dir / goal.task_id
        manifest = load_manifest(run_dir)
        if resume and manifest is not None and manifest.status == "complete":
            log.info("skipping completed task %s", goal.task_id)
            return TaskOutcome(task_id=goal.task_id, status="skipped", row=_row_from_disk(run_dir))
        try:
            row = run_task(goal, run_dir, cfg, backends, templates, evals=evals)
            return TaskOutcome(task_id=goal.task_id, status="ok", row=row)
        except MMPlanError as exc:
            log.error("task %s failed: %s", goal.task_id, exc)
            return TaskOutcome(task_id=goal.task_id, status="failed", error=str(exc))

    goals = [goal for goal, _reference in dataset_pairs]
    pool_size = workers if workers is not None else cfg.workers
    if pool_size > 1 and len(goals) > 1:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            outcomes = list(pool.map(one, goals))
    else:
        outcomes = [one(goal) for goal in goals]

    result = CorpusResult(outcomes=outcomes)
    write_summary(out_dir, result)
    return result


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def summary_csv_text(result: CorpusResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for outcome in result.outcomes:
        if outcome.row is None:
            continue
        writer.writerow([_csv_cell(outcome.row.get(col)) for col in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_summary(out_dir: Path, result: CorpusResult) -> None:
    out_dir = Path(out_dir)
    rows = [o.row for o in result.outcomes if o.row is not None]

    def mean_of(col: str):
        values = [r[col] for r in rows if r.get(col) is not None]
        return sum(values) / len(values) if values else None

    doc = {
        "tasks": [
            {"task_id": o.task_id, "status": o.status, "error": o.error, **(o.row or {})}
            for o in result.outcomes
        ],
        "corpus_means": {col: mean_of(col) for col in SUMMARY_COLUMNS[2:]},
        "failures": [f"{o.task_id}: {o.error}" for o in result.failed],
        "generated_at": utc_now(),
    }
    atomic_write_text(out_dir / "summary.json", dump_json(doc))
    atomic_write_text(out_dir / "summary.csv", summary_csv_text(result))
