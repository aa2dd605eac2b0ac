"""Visual step-ordering evaluation: shuffle a plan's step images, ask a
sequencer backend to recover the order, and score the prediction.

All metrics are pure functions of a :class:`Permutation` whose gold order is
the identity. Conventions:

- Accuracy: percent of positions holding their own item.
- Dist: sum of absolute positional deviations (not the mean).
- MS: minimum number of swaps to sort = n minus the number of cycles.
- WMS: total positional distance of the canonical swap sequence that
  repeatedly swaps the leftmost misplaced position with the position
  currently holding its item.
- LCS: longest common subsequence against the gold order, which for a
  permutation is the longest increasing subsequence of the mapping.
- Kendall tau: 1 - 2 * inversions / C(n, 2).
"""

from __future__ import annotations

import base64
import hashlib
import random
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .core.permutation import Permutation
from .core.types import Plan
from .errors import PipelineError, ProtocolError

FIRST_STEPS_LIMIT = 5


def accuracy(pred: Permutation) -> float:
    n = len(pred)
    fixed = sum(1 for p in range(1, n + 1) if pred(p) == p)
    return 100.0 * fixed / n


def distance(pred: Permutation) -> float:
    return float(sum(abs(pred(p) - p) for p in range(1, len(pred) + 1)))


def kendall_tau(pred: Permutation) -> float:
    n = len(pred)
    if n < 2:
        raise ValueError("kendall tau needs n >= 2")
    pairs = n * (n - 1) // 2
    return 1.0 - 2.0 * pred.inversions() / pairs


def min_swaps(pred: Permutation) -> int:
    return len(pred) - pred.num_cycles()


def weighted_min_swaps(pred: Permutation) -> float:
    """Cost of the canonical cycle-resolution sort.

    Scan positions left to right; whenever position p holds the wrong item,
    swap it with the position currently holding item p and charge the
    positional distance |p - q|. Uses exactly min_swaps(pred) swaps, so
    WMS >= MS always.
    """
    arr = list(pred.mapping)
    pos = {item: i for i, item in enumerate(arr)}
    total = 0
    for p in range(len(arr)):
        want = p + 1
        if arr[p] == want:
            continue
        q = pos[want]
        total += abs(p - q)
        arr[p], arr[q] = arr[q], arr[p]
        pos[arr[q]] = q
        pos[arr[p]] = p
    return float(total)


def lcs_length(pred: Permutation) -> int:
    """Longest increasing subsequence of the mapping (patience sorting)."""
    tails: list[int] = []
    for x in pred.mapping:
        i = bisect_left(tails, x)
        if i == len(tails):
            tails.append(x)
        else:
            tails[i] = x
    return len(tails)


@dataclass(frozen=True)
class OrderingMetrics:
    acc: float
    dist: float
    ms: int
    wms: float
    lcs: int
    tau: float

    def as_dict(self) -> dict[str, float]:
        return {
            "acc": self.acc,
            "dist": self.dist,
            "ms": float(self.ms),
            "wms": self.wms,
            "lcs": float(self.lcs),
            "tau": self.tau,
        }


def compute_metrics(pred: Permutation) -> OrderingMetrics:
    return OrderingMetrics(
        acc=accuracy(pred),
        dist=distance(pred),
        ms=min_swaps(pred),
        wms=weighted_min_swaps(pred),
        lcs=lcs_length(pred),
        tau=kendall_tau(pred),
    )


# ---------------------------------------------------------------------------
# task construction


@dataclass(frozen=True)
class ShuffledTask:
    """Step images in shuffled order. ``shuffle(p)`` is the gold index of the
    image placed at input position p; gold is the identity by construction."""

    images: tuple[str, ...]  # relative image paths, shuffled order
    gold: Permutation
    shuffle: Permutation


def truncate_and_shuffle(plan: Plan, seed: int) -> ShuffledTask:
    """Take the first five visual steps (fewer if the plan is shorter) and
    shuffle them with a seeded, non-identity permutation."""
    visual = plan.visual_steps()
    if len(visual) < 2:
        raise ValueError("ordering needs at least 2 steps with selected images")
    items = visual[:FIRST_STEPS_LIMIT]
    n = len(items)
    rng = random.Random(seed)
    shuffle = Permutation.random(n, rng, exclude_identity=True)
    images = tuple(items[shuffle(p) - 1].selected_candidate().image for p in range(1, n + 1))
    return ShuffledTask(images=images, gold=Permutation.identity(n), shuffle=shuffle)


# ---------------------------------------------------------------------------
# sequencer backends


class Sequencer(Protocol):
    """Predicts the correct order of shuffled images.

    ``predict`` returns 1-based indices into the input list: entry q names
    the input image that belongs at recovered position q. ``gold_positions``
    carries the ground-truth gold index of each input position; only the
    oracle looks at it, real sequencers must ignore it.
    """

    name: str

    def predict(self, images: Sequence[bytes], gold_positions: Sequence[int]) -> list[int]:
        ...


class OracleSequencer:
    """Debug sequencer that returns the gold order exactly."""

    name = "oracle"

    def predict(self, images, gold_positions):
        order = [0] * len(images)
        for input_pos, gold_idx in enumerate(gold_positions, start=1):
            order[gold_idx - 1] = input_pos
        return order


class IdentitySequencer:
    """Never reorders: predicts the input order as-is, so the prediction is
    exactly the shuffle (a random-permutation baseline)."""

    name = "identity"

    def predict(self, images, gold_positions):
        return list(range(1, len(images) + 1))


class RandomSequencer:
    """Uniform random order, deterministic in (instance seed, image bytes)."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def predict(self, images, gold_positions):
        digest = hashlib.sha256(b"".join(images)).hexdigest()
        rng = random.Random(f"{self.seed}:{digest}")
        order = list(range(1, len(images) + 1))
        rng.shuffle(order)
        return order


class HttpSequencer:
    """POSTs ``{"images": [<base64 png>, ...]}`` to ``<base_url>/v1/sequence``
    and expects ``{"order": [1-based indices]}`` back."""

    name = "http"

    def __init__(self, base_url: str, timeout: float = 120.0, session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def predict(self, images, gold_positions):
        payload = {"images": [base64.b64encode(b).decode("ascii") for b in images]}
        resp = self.session.post(f"{self.base_url}/v1/sequence", json=payload, timeout=self.timeout)
        if resp.status_code != 200:
            raise ProtocolError(f"sequencer returned HTTP {resp.status_code}")
        doc = resp.json()
        if "order" not in doc:
            raise ProtocolError("sequencer response missing 'order'")
        return [int(v) for v in doc["order"]]


def make_sequencer(spec: str, seed: int = 0) -> Sequencer:
    """Build a sequencer from a CLI-style spec: oracle|identity|random|http:URL."""
    if spec == "oracle":
        return OracleSequencer()
    if spec == "identity":
        return IdentitySequencer()
    if spec == "random":
        return RandomSequencer(seed=seed)
    if spec.startswith("http:") or spec.startswith("https:"):
        return HttpSequencer(spec)
    raise ValueError(f"unknown sequencer: {spec!r}")


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class OrderingResult:
    gold: Permutation
    predicted: Permutation
    metrics: OrderingMetrics
    sequencer: str
    seed: int

    def as_dict(self) -> dict:
        return {
            "sequencer": self.sequencer,
            "seed": self.seed,
            "predicted": list(self.predicted.mapping),
            "metrics": self.metrics.as_dict(),
        }


def evaluate_ordering(plan: Plan, sequencer: Sequencer, seed: int, run_dir: Path) -> OrderingResult:
    """Shuffle the plan's step images, query the sequencer, and score.

    The sequencer's order is composed with the shuffle so the prediction is
    expressed relative to the gold order (identity).
    """
    task = truncate_and_shuffle(plan, seed)
    run_dir = Path(run_dir)
    blobs = []
    for rel in task.images:
        p = run_dir / rel
        if not p.is_file():
            raise PipelineError(f"step image missing: {p}")
        blobs.append(p.read_bytes())

    order = sequencer.predict(blobs, task.shuffle.mapping)
    n = len(task.images)
    try:
        order_perm = Permutation.from_list(order)
    except (ValueError, TypeError) as exc:
        raise ProtocolError(f"sequencer returned a non-permutation: {order!r}") from exc
    if len(order_perm) != n:
        raise ProtocolError(f"sequencer returned {len(order_perm)} indices for {n} images")

    predicted = task.shuffle.compose(order_perm)
    return OrderingResult(
        gold=task.gold,
        predicted=predicted,
        metrics=compute_metrics(predicted),
        sequencer=getattr(sequencer, "name", type(sequencer).__name__),
        seed=seed,
    )
