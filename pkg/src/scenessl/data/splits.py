"""Stratified hold-out selection and stratified k-fold assignment."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from ..errors import ContractError, DataError
from ..numerics import Rng
from .manifest import SampleManifest


def largest_remainder(counts: dict[str, int], fraction: Fraction) -> dict[str, int]:
    """Per-class quotas ``n·f`` rounded so they sum to ``round_half_up(N·f)``.

    Floors first; the leftover units go to the largest fractional parts,
    ties broken by class name.
    """
    exact = {c: n * fraction for c, n in counts.items()}
    quota = {c: math.floor(v) for c, v in exact.items()}
    total = math.floor(sum(counts.values()) * fraction + Fraction(1, 2))
    leftover = total - sum(quota.values())
    order = sorted(exact, key=lambda c: (-(exact[c] - quota[c]), c))
    for c in order[:leftover]:
        quota[c] += 1
    return quota


def stratified_split(m: SampleManifest, fraction: float, rng: Rng, target: str = "test") -> SampleManifest:
    """Move ``fraction`` of each class's training pool into split ``target``.

    The pool is every mapped row whose split is ``train`` or ``none``; pool
    rows that are not selected end up in ``train``. Selection within a class
    is a prefix of a permutation drawn from ``rng.child(class)``.
    """
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    frac = Fraction(fraction).limit_denominator(10**6)
    pool: dict[str, list[int]] = defaultdict(list)
    for i, row in enumerate(m.rows):
        if row.mapped and row.split in ("train", "none"):
            pool[row.mapped_class].append(i)
    if not pool:
        raise DataError(f"{m.name!r} has no mapped training rows to split")
    minimum = math.ceil(1 / frac)
    for cls, idx in sorted(pool.items()):
        if len(idx) < minimum:
            raise DataError(f"class {cls!r} has {len(idx)} samples; need at least {minimum} for fraction {fraction}")
    quota = largest_remainder({c: len(v) for c, v in pool.items()}, frac)
    chosen = set()
    for cls in sorted(pool):
        idx = pool[cls]
        perm = rng.child(cls).permutation(len(idx))
        chosen.update(idx[j] for j in perm[: quota[cls]])
    rows = list(m.rows)
    for cls, idx in pool.items():
        for i in idx:
            rows[i] = replace(rows[i], split=target if i in chosen else "train")
    return m.with_rows(rows, **{f"{target}_fraction": str(fraction)})


@dataclass(frozen=True)
class FoldPlan:
    """Fold ids for the training pool, one row of assignments per repetition.

    ``pool[j]`` is a manifest row index; ``assignments[r, j]`` its fold in
    repetition ``r``.
    """

    k: int
    repetitions: int
    pool: np.ndarray
    assignments: np.ndarray

    def split(self, repetition: int, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(training rows, held-out rows) as manifest indices."""
        if not (0 <= repetition < self.repetitions and 0 <= fold < self.k):
            raise ContractError(f"no cell (repetition={repetition}, fold={fold}) in a {self.repetitions}x{self.k} plan")
        held = self.assignments[repetition] == fold
        return self.pool[~held], self.pool[held]


def make_folds(m: SampleManifest, k: int = 5, repetitions: int = 3, rng: Rng | None = None) -> FoldPlan:
    """Stratified k-fold assignment of the ``train`` rows, reshuffled per repetition.

    Classes are dealt round-robin onto folds in sorted class order with a
    running offset, so every fold's per-class count differs by at most one
    and the per-fold class histogram is the same in every repetition; only
    which rows land where changes (stream ``rng.child("folds", r)``).
    """
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if repetitions < 1:
        raise ContractError("repetitions must be positive")
    rng = rng or Rng(0)
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, row in enumerate(m.rows):
        if row.mapped and row.split == "train":
            by_class[row.mapped_class].append(i)
    for cls, idx in sorted(by_class.items()):
        if len(idx) < k:
            raise DataError(f"class {cls!r} has {len(idx)} training rows, fewer than k={k}")
    pool = np.array(sorted(i for idx in by_class.values() for i in idx), dtype=np.int64)
    position = {int(i): j for j, i in enumerate(pool)}
    assignments = np.empty((repetitions, len(pool)), dtype=np.int64)
    for r in range(repetitions):
        stream = rng.child("folds", r)
        offset = 0
        for cls in sorted(by_class):
            idx = by_class[cls]
            perm = stream.child(cls).permutation(len(idx))
            for slot, j in enumerate(perm):
                assignments[r, position[idx[j]]] = (offset + slot) % k
            offset += len(idx)
    return FoldPlan(k, repetitions, pool, assignments)
