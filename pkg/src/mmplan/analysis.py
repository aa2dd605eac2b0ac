"""Reliability and agreement tooling: plan perturbations (shuffle / delete),
judge-score sweeps over deletion fractions, Spearman rank correlation, and
weighted Cohen's kappa for Likert ratings.
"""

from __future__ import annotations

import csv
import hashlib
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core.permutation import Permutation
from .core.types import JudgeVerdict, PlanStep
from .errors import MMPlanError


def permute_steps(steps: Sequence[PlanStep], seed: int) -> list[PlanStep]:
    """Seeded uniform non-identity shuffle of the steps, renumbered 1..n."""
    if len(steps) < 2:
        raise ValueError("permute_steps needs at least 2 steps")
    rng = random.Random(seed)
    perm = Permutation.random(len(steps), rng, exclude_identity=True)
    return [replace(steps[perm(p) - 1], index=p) for p in range(1, len(steps) + 1)]


def delete_steps(steps: Sequence[PlanStep], fraction: float, seed: int) -> list[PlanStep]:
    """Remove a seeded uniform subset; survivors keep relative order and are
    renumbered 1..m with m = ceil(n * (1 - fraction))."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    n = len(steps)
    keep = math.ceil(n * (1.0 - fraction))
    if keep < 1:
        raise ValueError("deletion would leave zero steps")
    if keep == n:
        return [replace(s, index=i) for i, s in enumerate(steps, start=1)]
    rng = random.Random(seed)
    survivors = sorted(rng.sample(range(n), keep))
    return [replace(steps[j], index=i) for i, j in enumerate(survivors, start=1)]


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    mean: float | None
    scores: tuple[int | None, ...]

    @property
    def absent(self) -> int:
        return sum(1 for s in self.scores if s is None)


def _cell_seed(base_seed: int, fraction: float) -> int:
    digest = hashlib.sha256(f"{base_seed}:{fraction}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def reliability_sweep(
    steps: Sequence[PlanStep],
    goal_text: str,
    fractions: Sequence[float],
    seeds: Sequence[int],
    judge: Callable[[str, list[str]], JudgeVerdict],
) -> list[SweepRow]:
    """For each fraction x seed, delete steps and re-judge the survivors.

    Judge failures become absent cells. Deletion seeds are derived per
    fraction so rows don't share nested subsets.
    """
    rows = []
    for fraction in fractions:
        scores: list[int | None] = []
        for seed in seeds:
            kept = delete_steps(steps, fraction, seed=_cell_seed(seed, fraction))
            try:
                verdict = judge(goal_text, [s.text for s in kept])
                scores.append(verdict.score)
            except MMPlanError:
                scores.append(None)
        present = [s for s in scores if s is not None]
        mean = sum(present) / len(present) if present else None
        rows.append(SweepRow(fraction=fraction, mean=mean, scores=tuple(scores)))
    return rows


def sweep_rows_to_csv(rows: Sequence[SweepRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean", "n_scored", "n_absent"])
        for row in rows:
            writer.writerow([row.fraction, "" if row.mean is None else f"{row.mean:.4f}",
                             len(row.scores) - row.absent, row.absent])


# ---------------------------------------------------------------------------
# correlation statistics


def _average_ranks(values: Sequence[float]) -> list[float]:
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    if len(x) != len(y):
        raise ValueError("series must have equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 observations")
    rx = np.asarray(_average_ranks(x))
    ry = np.asarray(_average_ranks(y))
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    varx = float(dx @ dx)
    vary = float(dy @ dy)
    if varx == 0.0 or vary == 0.0:
        raise ValueError("spearman_rho is undefined for constant series")
    return float(dx @ dy) / math.sqrt(varx * vary)


def weighted_kappa(
    ratings_a: Sequence[int],
    ratings_b: Sequence[int],
    categories: int = 5,
    weights: str = "quadratic",
) -> float:
    """Weighted Cohen's kappa over integer ratings 1..categories.

    Quadratic weights w_ij = (i-j)^2 / (C-1)^2 by default; "linear" uses
    |i-j| / (C-1). Two identical constant vectors count as perfect agreement.
    """
    if len(ratings_a) != len(ratings_b):
        raise ValueError("rating vectors must have equal length")
    if not ratings_a:
        raise ValueError("rating vectors must be nonempty")
    if weights not in ("quadratic", "linear"):
        raise ValueError(f"unknown weight scheme: {weights!r}")
    c = categories
    for v in (*ratings_a, *ratings_b):
        if not isinstance(v, (int, np.integer)) or not 1 <= int(v) <= c:
            raise ValueError(f"rating out of range 1..{c}: {v!r}")

    observed = np.zeros((c, c), dtype=np.float64)
    for a, b in zip(ratings_a, ratings_b):
        observed[int(a) - 1, int(b) - 1] += 1.0
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n

    idx = np.arange(c, dtype=np.float64)
    diff = np.abs(idx[:, None] - idx[None, :])
    denom = max(c - 1, 1)
    w = (diff / denom) ** 2 if weights == "quadratic" else diff / denom

    disagreement = float((w * observed).sum())
    chance = float((w * expected).sum())
    if chance == 0.0:
        if disagreement == 0.0:
            return 1.0
        raise ValueError("kappa undefined: zero chance disagreement but observed disagreement")
    return 1.0 - disagreement / chance


# ---------------------------------------------------------------------------
# multi-rater reduction over a ratings table


def load_ratings(path: Path) -> dict[str, dict[str, int]]:
    """ratings.csv with header rater_id,item_id,score -> {rater: {item: score}}."""
    table: dict[str, dict[str, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"rater_id", "item_id", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"ratings file must have columns {sorted(required)}")
        for row in reader:
            table.setdefault(row["rater_id"], {})[row["item_id"]] = int(row["score"])
    return table


def mean_pairwise(
    table: dict[str, dict[str, int]],
    stat: Callable[[list[int], list[int]], float],
) -> float:
    """Average a pairwise statistic across all rater pairs (common items only)."""
    raters = sorted(table)
    if len(raters) < 2:
        raise ValueError("need at least 2 raters")
    values = []
    for i in range(len(raters)):
        for j in range(i + 1, len(raters)):
            common = sorted(set(table[raters[i]]) & set(table[raters[j]]))
            if not common:
                continue
            a = [table[raters[i]][item] for item in common]
            b = [table[raters[j]][item] for item in common]
            values.append(stat(a, b))
    if not values:
        raise ValueError("no rater pairs share items")
    return sum(values) / len(values)
