"""Command-line entry point.

Subcommands: plan, eval-text, eval-align, eval-order, perturb, stats,
run-corpus, report, config-dump. Exit codes: 0 success, 1 partial/task
failure, 2 configuration error, 3 backend or protocol error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

from .analysis import (
    delete_steps,
    load_ratings,
    mean_pairwise,
    permute_steps,
    spearman_rho,
    weighted_kappa,
)
from .config import build_backends, resolve_config
from .core.serialization import (
    SCORES_FILE,
    atomic_write_text,
    dump_json,
    load_dataset,
    load_plan,
    save_plan,
)
from .core.types import MultimodalGoal
from .errors import BackendError, ConfigError, MMPlanError, ProtocolError
from .judge import evaluate_plan_alignment, evaluate_plan_text
from .ordering import evaluate_ordering, make_sequencer
from .pipeline.planner import Planner
from .pipeline.templates import TemplateLibrary
from .report import emit_corpus_report, emit_report
from .runner import DEFAULT_EVALS, pipeline_config, run_corpus

log = logging.getLogger("mmplan")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


def _slug(text: str, limit: int = 40) -> str:
    slug = re.sub(r"[^0-9A-Za-z]+", "-", text.lower()).strip("-")
    return slug[:limit].rstrip("-") or "task"


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file path (or MMPLAN_CONFIG)")
    parser.add_argument("--cache-dir", dest="cache_dir", help="response cache directory")
    parser.add_argument("--templates-dir", dest="templates_dir", help="prompt template override directory")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--verbose", action="store_true")


def _cfg_from_args(args, **extra):
    cli = {
        "config": getattr(args, "config", None),
        "cache_dir": getattr(args, "cache_dir", None),
        "templates_dir": getattr(args, "templates_dir", None),
        "seed": getattr(args, "seed", None),
    }
    cli.update(extra)
    return resolve_config(cli)


def _run_dir_of(plan_arg: str) -> Path:
    p = Path(plan_arg)
    return p.parent if p.is_file() else p


def _merge_scores(run_dir: Path, update: dict) -> dict:
    from .core.serialization import load_manifest, sha256_file, write_manifest

    path = run_dir / SCORES_FILE
    doc = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    doc.update(update)
    atomic_write_text(path, dump_json(doc))
    manifest = load_manifest(run_dir)
    if manifest is not None:
        manifest.files[SCORES_FILE] = sha256_file(path)
        write_manifest(run_dir, manifest)
    return doc


def _templates(cfg) -> TemplateLibrary:
    return TemplateLibrary(Path(cfg.templates_dir) if cfg.templates_dir else None)


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_plan(args) -> int:
    stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else None
    cfg = _cfg_from_args(
        args,
        k=args.k,
        variant=args.variant,
        stages=stages,
        goal_image=False if args.no_goal_image else None,
    )
    task_id = args.task_id or _slug(args.goal)
    out = Path(args.out) if args.out else Path("runs") / task_id
    goal = MultimodalGoal(goal_text=args.goal, task_id=task_id)
    backends = build_backends(cfg)
    planner = Planner(
        backends=backends,
        templates=_templates(cfg),
        run_dir=out,
        config=pipeline_config(cfg),
    )
    plan = planner.run(goal)
    print(f"{out / 'plan.json'}: {len(plan.steps)} steps")
    return EXIT_OK


def cmd_eval_text(args) -> int:
    cfg = _cfg_from_args(args)
    run_dir = _run_dir_of(args.plan)
    plan = load_plan(Path(args.plan))
    if not plan.steps:
        raise MMPlanError("plan has no steps to judge")
    plan = evaluate_plan_text(plan, build_backends(cfg), _templates(cfg), seed=cfg.seed)
    save_plan(plan, run_dir)
    _merge_scores(run_dir, {"tplan": {"score": plan.tplan_verdict.score,
                                      "explanation": plan.tplan_verdict.explanation}})
    print(f"tplan: {plan.tplan_verdict.score}")
    return EXIT_OK


def cmd_eval_align(args) -> int:
    cfg = _cfg_from_args(args)
    metrics = tuple(m.strip() for m in args.metric.split(",") if m.strip())
    unknown = set(metrics) - {"ca", "clip"}
    if unknown:
        raise ConfigError(f"unknown alignment metrics: {sorted(unknown)}")
    run_dir = _run_dir_of(args.plan)
    plan = load_plan(Path(args.plan))
    plan, issues = evaluate_plan_alignment(
        plan, run_dir, build_backends(cfg), _templates(cfg), metrics, seed=cfg.seed
    )
    save_plan(plan, run_dir)
    step_rows = [
        {"index": s.index, "ca": s.ca_verdict.score if s.ca_verdict else None, "clip": s.clip_score}
        for s in plan.steps
    ]
    _merge_scores(run_dir, {"steps": step_rows, "issues": issues})
    ca = [r["ca"] for r in step_rows if r["ca"] is not None]
    clip = [r["clip"] for r in step_rows if r["clip"] is not None]
    if ca:
        print(f"ca_mean: {sum(ca) / len(ca):.2f}")
    if clip:
        print(f"clip_mean: {sum(clip) / len(clip):.2f}")
    for issue in issues:
        print(f"warning: {issue}", file=sys.stderr)
    return EXIT_OK


def cmd_eval_order(args) -> int:
    cfg = _cfg_from_args(args, sequencer=args.sequencer)
    run_dir = _run_dir_of(args.plan)
    plan = load_plan(Path(args.plan))
    sequencer = make_sequencer(cfg.sequencer, seed=cfg.seed)
    result = evaluate_ordering(plan, sequencer, seed=cfg.seed, run_dir=run_dir)
    _merge_scores(run_dir, {"ordering": result.as_dict()})
    print(json.dumps(result.metrics.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_perturb(args) -> int:
    plan_path = Path(args.plan)
    plan = load_plan(plan_path)
    if args.mode == "permute":
        steps = permute_steps(plan.steps, seed=args.seed or 0)
        event = f"permuted steps with seed {args.seed or 0}"
    else:
        steps = delete_steps(plan.steps, fraction=args.fraction, seed=args.seed or 0)
        event = f"deleted fraction {args.fraction} with seed {args.seed or 0}"
    provenance = dict(plan.provenance)
    provenance["perturbation"] = event
    perturbed = dataclasses.replace(
        plan, steps=tuple(steps), tplan_verdict=None, provenance=provenance
    )
    base = plan_path if plan_path.is_file() else plan_path / "plan.json"
    out = Path(args.out) if args.out else base.with_name("plan_perturbed.json")
    from .core.serialization import plan_to_doc

    atomic_write_text(out, dump_json(plan_to_doc(perturbed, base_dir=out.parent)))
    print(f"{out}: {len(steps)} steps ({event})")
    return EXIT_OK


def cmd_stats(args) -> int:
    table = load_ratings(Path(args.input))
    if args.mode == "spearman":
        value = mean_pairwise(table, lambda a, b: spearman_rho(a, b))
    else:
        value = mean_pairwise(
            table,
            lambda a, b: weighted_kappa(a, b, categories=args.categories, weights=args.weights),
        )
    print(json.dumps({"mode": args.mode, "value": value, "raters": len(table)}, sort_keys=True))
    return EXIT_OK


def cmd_run_corpus(args) -> int:
    stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else None
    cfg = _cfg_from_args(
        args,
        k=args.k,
        variant=args.variant,
        stages=stages,
        sequencer=args.sequencer,
        workers=args.workers,
    )
    dataset = load_dataset(Path(args.dataset))
    for issue in dataset.issues:
        print(f"{issue.kind}: {issue.path}: {issue.message}", file=sys.stderr)
    evals = tuple(e.strip() for e in args.evals.split(",") if e.strip()) if args.evals else DEFAULT_EVALS
    result = run_corpus(
        dataset.pairs,
        Path(args.out),
        cfg,
        evals=evals,
        dry_run=args.dry_run,
        resume=not args.no_resume,
    )
    for outcome in result.outcomes:
        print(f"{outcome.task_id}: {outcome.status}" + (f" ({outcome.error})" if outcome.error else ""))
    if result.failed:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(args) -> int:
    if args.run:
        path = emit_report(Path(args.run))
    else:
        path = emit_corpus_report(Path(args.corpus))
    print(str(path))
    return EXIT_OK


def cmd_config_dump(args) -> int:
    cfg = _cfg_from_args(args)
    print(cfg.dump())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="generate a multimodal plan for a goal")
    p.add_argument("--goal", required=True)
    p.add_argument("--task-id", dest="task_id")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--variant", choices=("osrcot", "v1", "v2", "v3"))
    p.add_argument("--stages", help="comma list from: text,describe,images,select")
    p.add_argument("--no-goal-image", action="store_true")
    _common_flags(p)
    p.set_defaults(handler=cmd_plan)

    p = sub.add_parser("eval-text", help="judge plan/goal alignment")
    p.add_argument("--plan", required=True, help="run directory or plan.json")
    _common_flags(p)
    p.set_defaults(handler=cmd_eval_text)

    p = sub.add_parser("eval-align", help="score step image/text alignment")
    p.add_argument("--plan", required=True)
    p.add_argument("--metric", default="ca,clip")
    _common_flags(p)
    p.set_defaults(handler=cmd_eval_align)

    p = sub.add_parser("eval-order", help="shuffled visual step ordering evaluation")
    p.add_argument("--plan", required=True)
    p.add_argument("--sequencer", default=None, help="oracle|identity|random|http://...")
    _common_flags(p)
    p.set_defaults(handler=cmd_eval_order)

    p = sub.add_parser("perturb", help="permute or delete plan steps")
    p.add_argument("--plan", required=True)
    p.add_argument("--mode", choices=("permute", "delete"), required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_perturb)

    p = sub.add_parser("stats", help="rater agreement statistics over ratings.csv")
    p.add_argument("--mode", choices=("spearman", "kappa"), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--weights", choices=("quadratic", "linear"), default="quadratic")
    p.add_argument("--categories", type=int, default=5)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("run-corpus", help="run every dataset task and summarize")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--evals", help=f"comma list from: {','.join(DEFAULT_EVALS)}")
    p.add_argument("--k", type=int)
    p.add_argument("--variant", choices=("osrcot", "v1", "v2", "v3"))
    p.add_argument("--stages")
    p.add_argument("--sequencer")
    p.add_argument("--workers", type=int)
    p.add_argument("--dry-run", dest="dry_run", action="store_true")
    p.add_argument("--no-resume", dest="no_resume", action="store_true")
    _common_flags(p)
    p.set_defaults(handler=cmd_run_corpus)

    p = sub.add_parser("report", help="emit report.html for a run or corpus")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--run")
    group.add_argument("--corpus")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("config-dump", help="print the fully resolved configuration")
    _common_flags(p)
    p.set_defaults(handler=cmd_config_dump)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, ProtocolError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except MMPlanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
