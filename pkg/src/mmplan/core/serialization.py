"""On-disk layout of runs: plan.json schema, run manifests, dataset loading.

A run directory looks like::

    runs/<run_id>/plan.json
    runs/<run_id>/images/goal.png
    runs/<run_id>/images/step_<i>_cand_<k>.png
    runs/<run_id>/manifest.json
    runs/<run_id>/scores.json          (written by the eval commands)
    runs/<run_id>/report.html|report.md

plan.json is written with sorted keys and stable float formatting so that
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ..errors import DatasetError
from .types import CandidateImage, DescriptionRecord, JudgeVerdict, MultimodalGoal, Plan, PlanStep

PLAN_FILE = "plan.json"
MANIFEST_FILE = "manifest.json"
SCORES_FILE = "scores.json"
IMAGES_DIR = "images"
GOAL_IMAGE = "images/goal.png"
REPORT_HTML = "report.html"
REPORT_MD = "report.md"


def step_image_name(step_index: int, k: int) -> str:
    return f"{IMAGES_DIR}/step_{step_index}_cand_{k}.png"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(path.read_bytes())


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a sibling temp file + rename so readers never see partial content."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# plan.json


def _verdict_to_doc(v: JudgeVerdict | None):
    if v is None:
        return None
    return {"score": v.score, "explanation": v.explanation, "raw": v.raw, "attempts": v.attempts}


def _verdict_from_doc(doc) -> JudgeVerdict | None:
    if doc is None:
        return None
    return JudgeVerdict(
        score=int(doc["score"]),
        explanation=doc.get("explanation", ""),
        raw=doc.get("raw", ""),
        attempts=int(doc.get("attempts", 1)),
    )


def plan_to_doc(plan: Plan, base_dir: Path | None = None) -> dict:
    """Serialize a plan. When ``base_dir`` is given, image references gain a
    content hash (null for files that are not present)."""

    def image_hash(rel: str | None):
        if rel is None or base_dir is None:
            return None
        p = base_dir / rel
        return sha256_file(p) if p.is_file() else None

    steps = []
    for s in plan.steps:
        desc = None
        if s.description is not None:
            desc = {
                "image_description": s.description.image_description,
                "step_detail": s.description.step_detail,
                "before_states": list(s.description.before_states),
                "after_states": list(s.description.after_states),
            }
        steps.append(
            {
                "index": s.index,
                "text": s.text,
                "description": desc,
                "candidates": [
                    {
                        "k": c.k,
                        "image": c.image,
                        "sha256": image_hash(c.image),
                        "embedding": list(c.embedding) if c.embedding is not None else None,
                        "similarity": c.similarity,
                    }
                    for c in s.candidates
                ],
                "selected": s.selected,
                "ca_verdict": _verdict_to_doc(s.ca_verdict),
                "clip_score": s.clip_score,
            }
        )
    return {
        "goal": {
            "task_id": plan.goal.task_id,
            "goal_text": plan.goal.goal_text,
            "goal_image": plan.goal.goal_image,
            "goal_image_sha256": image_hash(plan.goal.goal_image),
        },
        "steps": steps,
        "tplan_verdict": _verdict_to_doc(plan.tplan_verdict),
        "provenance": plan.provenance,
    }


def plan_from_doc(doc: dict) -> Plan:
    g = doc["goal"]
    goal = MultimodalGoal(goal_text=g["goal_text"], task_id=g["task_id"], goal_image=g.get("goal_image"))
    steps = []
    for sd in doc.get("steps", []):
        desc = None
        if sd.get("description") is not None:
            d = sd["description"]
            desc = DescriptionRecord(
                image_description=d["image_description"],
                step_detail=d.get("step_detail", ""),
                before_states=tuple(d.get("before_states", [])),
                after_states=tuple(d.get("after_states", [])),
            )
        candidates = tuple(
            CandidateImage(
                k=cd["k"],
                image=cd["image"],
                embedding=tuple(cd["embedding"]) if cd.get("embedding") is not None else None,
                similarity=cd.get("similarity"),
            )
            for cd in sd.get("candidates", [])
        )
        steps.append(
            PlanStep(
                index=sd["index"],
                text=sd["text"],
                description=desc,
                candidates=candidates,
                selected=sd.get("selected"),
                ca_verdict=_verdict_from_doc(sd.get("ca_verdict")),
                clip_score=sd.get("clip_score"),
            )
        )
    return Plan(
        goal=goal,
        steps=tuple(steps),
        tplan_verdict=_verdict_from_doc(doc.get("tplan_verdict")),
        provenance=doc.get("provenance", {}),
    )


def save_plan(plan: Plan, run_dir: Path) -> dict[str, str]:
    """Write plan.json and refresh the manifest's file hashes.

    Returns the manifest ``files`` map (relative path -> sha256). Image files
    are expected to already sit under ``run_dir`` (the pipeline writes them as
    it samples); only files actually present are hashed.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / PLAN_FILE, dump_json(plan_to_doc(plan, base_dir=run_dir)))

    files: dict[str, str] = {PLAN_FILE: sha256_file(run_dir / PLAN_FILE)}
    refs = [c.image for s in plan.steps for c in s.candidates]
    if plan.goal.goal_image:
        refs.append(plan.goal.goal_image)
    for rel in refs:
        p = run_dir / rel
        if p.is_file():
            files[rel] = sha256_file(p)
    scores = run_dir / SCORES_FILE
    if scores.is_file():
        files[SCORES_FILE] = sha256_file(scores)

    manifest = load_manifest(run_dir) or RunManifest(run_id=run_dir.name)
    manifest.files.update(files)
    write_manifest(run_dir, manifest)
    return files


def load_plan(path: Path) -> Plan:
    path = Path(path)
    if path.is_dir():
        path = path / PLAN_FILE
    with open(path, encoding="utf-8") as fh:
        return plan_from_doc(json.load(fh))


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Content-hashed index of everything a run produced."""

    run_id: str
    seed: int = 0
    created_at: str = field(default_factory=utc_now)
    completed_at: str | None = None
    status: str = "partial"  # partial | complete | failed
    config: dict[str, Any] = field(default_factory=dict)
    models: dict[str, str] = field(default_factory=dict)
    backend_calls: dict[str, int] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "created_at": self.created_at,
            "completed_at": self.completed_at,
            "status": self.status,
            "config": self.config,
            "models": self.models,
            "backend_calls": self.backend_calls,
            "events": self.events,
            "files": self.files,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunManifest":
        return cls(
            run_id=doc["run_id"],
            seed=int(doc.get("seed", 0)),
            created_at=doc.get("created_at", utc_now()),
            completed_at=doc.get("completed_at"),
            status=doc.get("status", "partial"),
            config=doc.get("config", {}),
            models=doc.get("models", {}),
            backend_calls=doc.get("backend_calls", {}),
            events=doc.get("events", []),
            files=doc.get("files", {}),
        )


def write_manifest(run_dir: Path, manifest: RunManifest) -> None:
    atomic_write_text(Path(run_dir) / MANIFEST_FILE, dump_json(manifest.to_doc()))


def load_manifest(run_dir: Path) -> RunManifest | None:
    p = Path(run_dir) / MANIFEST_FILE
    if not p.is_file():
        return None
    with open(p, encoding="utf-8") as fh:
        return RunManifest.from_doc(json.load(fh))


def verify_manifest(run_dir: Path) -> list[str]:
    """Return the relative paths whose content hash no longer matches."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    if manifest is None:
        return [MANIFEST_FILE]
    bad = []
    for rel, digest in manifest.files.items():
        p = run_dir / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# ---------------------------------------------------------------------------
# dataset loading


@dataclass(frozen=True)
class LoadIssue:
    path: str
    kind: str  # error | warning
    message: str


@dataclass
class DatasetLoadResult:
    pairs: list[tuple[MultimodalGoal, Plan]]
    issues: list[LoadIssue]

    @property
    def errors(self) -> list[LoadIssue]:
        return [i for i in self.issues if i.kind == "error"]


def load_dataset(path: Path) -> DatasetLoadResult:
    """Load task files (``*.json``) from a directory.

    One file per task: ``{"task_id": str, "goal": str, "steps": [{"text": str,
    "image": optional relative path}]}``. Reference steps keep file order;
    missing image files degrade to steps without an image reference, with a
    warning collected in the result. Malformed files are collected as errors
    and skipped; an empty directory is an empty result, not an error.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")

    pairs: list[tuple[MultimodalGoal, Plan]] = []
    issues: list[LoadIssue] = []
    for task_file in sorted(root.glob("*.json")):
        try:
            with open(task_file, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            issues.append(LoadIssue(str(task_file), "error", f"malformed JSON: {exc}"))
            continue
        try:
            goal_text = doc["goal"]
            raw_steps = doc["steps"]
            if not isinstance(goal_text, str) or not isinstance(raw_steps, list):
                raise KeyError("goal/steps have wrong types")
        except (KeyError, TypeError) as exc:
            issues.append(LoadIssue(str(task_file), "error", f"schema violation: {exc}"))
            continue

        task_id = doc.get("task_id") or task_file.stem
        if "task_id" not in doc:
            issues.append(LoadIssue(str(task_file), "warning", "task_id missing, using file stem"))
        try:
            goal = MultimodalGoal(goal_text=goal_text, task_id=str(task_id))
        except ValueError as exc:
            issues.append(LoadIssue(str(task_file), "error", str(exc)))
            continue

        steps = []
        for i, sd in enumerate(raw_steps, start=1):
            text = sd.get("text", "") if isinstance(sd, dict) else ""
            image_rel = sd.get("image") if isinstance(sd, dict) else None
            candidates: tuple[CandidateImage, ...] = ()
            selected = None
            if image_rel:
                if (root / image_rel).is_file():
                    candidates = (CandidateImage(k=1, image=image_rel),)
                    selected = 1
                else:
                    issues.append(
                        LoadIssue(str(task_file), "warning", f"step {i}: image not found: {image_rel}")
                    )
            steps.append(PlanStep(index=i, text=text, candidates=candidates, selected=selected))
        if not steps:
            issues.append(LoadIssue(str(task_file), "warning", "task has zero steps"))

        reference = Plan(
            goal=goal,
            steps=tuple(steps),
            provenance={"source": "dataset", "dataset_dir": str(root)},
        )
        pairs.append((goal, reference))
    return DatasetLoadResult(pairs=pairs, issues=issues)
