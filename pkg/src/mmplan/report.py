"""Static report emission: a self-contained report.html (+ report.md) per run
directory, and a corpus-level report whose metrics table mirrors summary.csv
cell for cell. Images are inlined as base64; nothing references external
assets.
"""

from __future__ import annotations

import base64
import csv
import html
import json
from pathlib import Path

from .core.serialization import (
    REPORT_HTML,
    REPORT_MD,
    SCORES_FILE,
    atomic_write_text,
    load_manifest,
    load_plan,
    sha256_file,
    write_manifest,
)
from .core.types import Plan

_STYLE = """
body { font-family: sans-serif; margin: 2em; max-width: 72em; }
table { border-collapse: collapse; margin: 1em 0; }
td, th { border: 1px solid #999; padding: 0.4em 0.7em; vertical-align: top; text-align: left; }
img.step { width: 128px; image-rendering: pixelated; }
.placeholder { color: #777; font-style: italic; }
.score { font-weight: bold; }
"""


def _inline_image(run_dir: Path, rel: str | None) -> str:
    if rel:
        p = run_dir / rel
        if p.is_file():
            data = base64.b64encode(p.read_bytes()).decode("ascii")
            return f'<img class="step" src="data:image/png;base64,{data}" alt="{html.escape(rel)}"/>'
    return '<span class="placeholder">no image</span>'


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def emit_report(run_dir: Path) -> Path:
    """Render one run: goal, per-step text/image/scores, plan-level scores."""
    run_dir = Path(run_dir)
    plan = load_plan(run_dir)
    scores = {}
    scores_file = run_dir / SCORES_FILE
    if scores_file.is_file():
        scores = json.loads(scores_file.read_text(encoding="utf-8"))

    has_images = any(s.selected is not None for s in plan.steps)
    rows = []
    for step in plan.steps:
        cells = [f"<td>{step.index}</td>", f"<td>{html.escape(step.text)}</td>"]
        if has_images:
            chosen = step.selected_candidate()
            cells.append(f"<td>{_inline_image(run_dir, chosen.image if chosen else None)}</td>")
        ca = step.ca_verdict.score if step.ca_verdict else None
        cells.append(f"<td>{_fmt(ca)}</td>")
        cells.append(f"<td>{_fmt(step.clip_score)}</td>")
        rows.append("<tr>" + "".join(cells) + "</tr>")

    header = ["<th>#</th>", "<th>step</th>"]
    if has_images:
        header.append("<th>image</th>")
    header += ["<th>CA</th>", "<th>CLIP</th>"]

    tplan = plan.tplan_verdict.score if plan.tplan_verdict else None
    ordering = scores.get("ordering") or {}
    ordering_html = ""
    if ordering.get("metrics"):
        m = ordering["metrics"]
        ordering_html = (
            "<h2>Step ordering</h2><table><tr>"
            + "".join(f"<th>{html.escape(k)}</th>" for k in ("acc", "dist", "ms", "wms", "lcs", "tau"))
            + "</tr><tr>"
            + "".join(f"<td>{_fmt(m.get(k))}</td>" for k in ("acc", "dist", "ms", "wms", "lcs", "tau"))
            + "</tr></table>"
        )

    goal_img = _inline_image(run_dir, plan.goal.goal_image) if plan.goal.goal_image else ""
    doc = f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{html.escape(plan.goal.task_id)}</title>
<style>{_STYLE}</style></head><body>
<h1>{html.escape(plan.goal.goal_text)}</h1>
<p>task: {html.escape(plan.goal.task_id)}</p>
{goal_img}
<p class="score">Plan score: {_fmt(tplan)}</p>
<table><tr>{''.join(header)}</tr>
{''.join(rows)}
</table>
{ordering_html}
</body></html>
"""
    atomic_write_text(run_dir / REPORT_HTML, doc)
    atomic_write_text(run_dir / REPORT_MD, _report_markdown(plan, tplan, ordering))

    manifest = load_manifest(run_dir)
    if manifest is not None:
        manifest.files[REPORT_HTML] = sha256_file(run_dir / REPORT_HTML)
        manifest.files[REPORT_MD] = sha256_file(run_dir / REPORT_MD)
        write_manifest(run_dir, manifest)
    return run_dir / REPORT_HTML


def _report_markdown(plan: Plan, tplan, ordering: dict) -> str:
    lines = [f"# {plan.goal.goal_text}", "", f"Plan score: {_fmt(tplan) or 'n/a'}", ""]
    for step in plan.steps:
        ca = step.ca_verdict.score if step.ca_verdict else None
        extras = []
        if ca is not None:
            extras.append(f"CA {ca}")
        if step.clip_score is not None:
            extras.append(f"CLIP {step.clip_score:.2f}")
        suffix = f"  ({', '.join(extras)})" if extras else ""
        lines.append(f"{step.index}. {step.text}{suffix}")
    if ordering.get("metrics"):
        m = ordering["metrics"]
        lines += ["", "Ordering: " + ", ".join(f"{k}={_fmt(m.get(k))}" for k in ("acc", "dist", "ms", "wms", "lcs", "tau"))]
    return "\n".join(lines) + "\n"


def emit_corpus_report(corpus_dir: Path) -> Path:
    """Corpus view: the summary.csv table rendered verbatim, cell for cell."""
    corpus_dir = Path(corpus_dir)
    csv_path = corpus_dir / "summary.csv"
    if not csv_path.is_file():
        raise FileNotFoundError(f"no summary.csv under {corpus_dir}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))

    table = ["<table>"]
    for i, row in enumerate(rows):
        tag = "th" if i == 0 else "td"
        table.append("<tr>" + "".join(f"<{tag}>{html.escape(cell)}</{tag}>" for cell in row) + "</tr>")
    table.append("</table>")

    failures_html = ""
    summary_json = corpus_dir / "summary.json"
    if summary_json.is_file():
        doc = json.loads(summary_json.read_text(encoding="utf-8"))
        failures = doc.get("failures") or []
        if failures:
            items = "".join(f"<li>{html.escape(str(f))}</li>" for f in failures)
            failures_html = f"<h2>Failures</h2><ul>{items}</ul>"

    page = f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>corpus summary</title>
<style>{_STYLE}</style></head><body>
<h1>Corpus summary</h1>
{''.join(table)}
{failures_html}
</body></html>
"""
    atomic_write_text(corpus_dir / REPORT_HTML, page)
    return corpus_dir / REPORT_HTML
