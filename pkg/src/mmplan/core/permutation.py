"""1-based permutations with the cycle/inversion utilities the ordering metrics need."""

from __future__ import annotations

import random
from dataclasses import dataclass


@dataclass(frozen=True)
class Permutation:
    """A bijection on {1..n}.

    ``mapping[p - 1]`` is the gold (true) index of the item sitting at
    predicted position ``p``. The identity permutation therefore means
    "every item is where it belongs".
    """

    mapping: tuple[int, ...]

    def __post_init__(self):
        n = len(self.mapping)
        if n < 1:
            raise ValueError("permutation must have length >= 1")
        if sorted(self.mapping) != list(range(1, n + 1)):
            raise ValueError(f"not a bijection on 1..{n}: {self.mapping!r}")

    @classmethod
    def from_list(cls, values) -> "Permutation":
        return cls(tuple(int(v) for v in values))

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(1, n + 1)))

    @classmethod
    def random(cls, n: int, rng: random.Random, exclude_identity: bool = False) -> "Permutation":
        """Uniform random permutation; optionally resampled until non-identity."""
        values = list(range(1, n + 1))
        while True:
            rng.shuffle(values)
            perm = cls(tuple(values))
            if not (exclude_identity and perm.is_identity()):
                return perm

    def __len__(self) -> int:
        return len(self.mapping)

    def __call__(self, p: int) -> int:
        """Gold index at 1-based position p."""
        return self.mapping[p - 1]

    def is_identity(self) -> bool:
        return all(v == p for p, v in enumerate(self.mapping, start=1))

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.mapping)
        for p, v in enumerate(self.mapping, start=1):
            inv[v - 1] = p
        return Permutation(tuple(inv))

    def compose(self, other: "Permutation") -> "Permutation":
        """(self ∘ other)(p) = self(other(p))."""
        if len(self) != len(other):
            raise ValueError("length mismatch")
        return Permutation(tuple(self(other(p)) for p in range(1, len(self) + 1)))

    def cycles(self) -> list[list[int]]:
        """Disjoint cycle decomposition (positions, including fixed points)."""
        n = len(self.mapping)
        seen = [False] * n
        out = []
        for start in range(1, n + 1):
            if seen[start - 1]:
                continue
            cycle = []
            p = start
            while not seen[p - 1]:
                seen[p - 1] = True
                cycle.append(p)
                p = self(p)
            out.append(cycle)
        return out

    def num_cycles(self) -> int:
        return len(self.cycles())

    def inversions(self) -> int:
        """Pairs p < q whose items appear in the wrong relative order."""
        m = self.mapping
        n = len(m)
        return sum(1 for p in range(n) for q in range(p + 1, n) if m[p] > m[q])
