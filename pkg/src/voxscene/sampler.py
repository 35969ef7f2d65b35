"""Class-balanced epoch planning: N random points per class, shuffled together."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cloud import LabeledCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassIndex:
    """class id -> (m, 2) int array of (cloud id, point index) rows."""

    entries: dict[int, np.ndarray]

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.entries.items()}

    def points(self, class_id: int) -> np.ndarray:
        return self.entries[class_id][:, 1]


@dataclass(frozen=True)
class EpochPlan:
    samples: np.ndarray  # (L, 3) rows of (cloud id, point index, class id)
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def per_class(self) -> dict[int, int]:
        cls, cnt = np.unique(self.samples[:, 2], return_counts=True)
        return dict(zip(cls.tolist(), cnt.tolist()))


def build_class_index(clouds: LabeledCloud | Sequence[LabeledCloud]) -> ClassIndex:
    if isinstance(clouds, LabeledCloud):
        clouds = [clouds]
    classes: set[int] = set()
    parts: dict[int, list[np.ndarray]] = {}
    for cid, cloud in enumerate(clouds):
        if cloud.labels is None:
            raise ValueError(f"cloud {cid} is unlabeled")
        classes.update(cloud.class_table)
        order = np.argsort(cloud.labels, kind="stable")
        lab = cloud.labels[order]
        bounds = np.flatnonzero(np.diff(lab)) + 1
        for chunk in np.split(order, bounds):
            if len(chunk):
                c = int(cloud.labels[chunk[0]])
                classes.add(c)
                parts.setdefault(c, []).append(
                    np.stack([np.full(len(chunk), cid), np.sort(chunk)], axis=1))
    if not parts:
        raise ValueError("no labeled points")
    entries = {c: (np.concatenate(parts[c]).astype(np.int64) if c in parts
                   else np.zeros((0, 2), dtype=np.int64))
               for c in sorted(classes)}
    return ClassIndex(entries)


def plan_epoch(index: ClassIndex, n_per_class: int = 1000, seed: int = 0) -> EpochPlan:
    """Draw n_per_class points for every non-empty class, then shuffle.

    Classes holding fewer than n_per_class points are drawn with replacement so
    every class contributes exactly n_per_class samples.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for c, members in sorted(index.entries.items()):
        m = len(members)
        if m == 0:
            log.warning("class %d has no points; skipped in this epoch", c)
            continue
        if m >= n_per_class:
            pick = rng.choice(m, size=n_per_class, replace=False)
        else:
            pick = rng.integers(0, m, size=n_per_class)
        chosen = members[pick]
        rows.append(np.column_stack([chosen, np.full(n_per_class, c)]))
    if not rows:
        raise ValueError("every class is empty")
    samples = np.concatenate(rows).astype(np.int64)
    return EpochPlan(samples[rng.permutation(len(samples))], seed)
