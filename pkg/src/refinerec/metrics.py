"""Ranking metrics and category statistics over retrieved lists.

Recall uses |targets| as the denominator (not min(N, |targets|)), matching the
candidate-matching lineage this follows; when a user has more targets than
retrieval slots the achievable recall is capped below 1 by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def recall_hr_ndcg(retrieved, targets, n: int | None = None):
    """(recall, hit rate, ndcg) for one ranked list against a target id set."""
    if not targets:
        raise ValueError("recall_hr_ndcg: empty target set")
    targets = set(targets)
    n = len(retrieved) if n is None else n
    hits = [rank for rank, item in enumerate(retrieved, start=1) if item in targets]
    recall = len(hits) / len(targets)
    hr = 1.0 if hits else 0.0
    dcg = sum(1.0 / math.log2(rank + 1) for rank in hits)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(n, len(targets)) + 1))
    return recall, hr, dcg / idcg


def hamming(x, y) -> int:
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"hamming: length mismatch {x.shape} vs {y.shape}")
    return int(np.sum(x != y))


def multi_hot(cat_set, n_categories: int) -> np.ndarray:
    vec = np.zeros(n_categories, dtype=np.int64)
    for c in cat_set:
        vec[c] = 1
    return vec


def concentration(retrieved, cats) -> float:
    """Mean pairwise Hamming distance between category encodings (lower = tighter)."""
    n = len(retrieved)
    if n < 2:
        raise ValueError("concentration needs at least 2 retrieved items")
    hots = [multi_hot(cats.cats_of(i), cats.n_categories) for i in retrieved]
    total = 0
    for j in range(n):
        for k in range(j + 1, n):
            total += hamming(hots[j], hots[k])
    return total / (n * (n - 1) / 2)


def diversity_all(retrieved, cats) -> float:
    """Fraction of unordered pairs whose category sets differ."""
    n = len(retrieved)
    if n < 2:
        raise ValueError("diversity_all needs at least 2 retrieved items")
    sets = [cats.cats_of(i) for i in retrieved]
    diff = 0
    for j in range(n):
        for k in range(j + 1, n):
            diff += sets[j] != sets[k]
    return diff / (n * (n - 1) / 2)


def diversity_hit(per_user_hits, cats) -> int:
    """Sum over users of the number of distinct categories among their hit items."""
    total = 0
    for hits in per_user_hits:
        union = set()
        for item in hits:
            union |= cats.cats_of(item)
        total += len(union)
    return total


@dataclass
class MetricsReport:
    """Per-metric means over evaluated users for one cutoff N."""

    n: int
    users: int
    recall: float
    hr: float
    ndcg: float
    conc: float | None = None
    div_all: float | None = None
    div_hit: int | None = None
    skipped_users: int = 0
    per_user: list = field(default_factory=list)

    def lines(self):
        out = [
            f"n={self.n}",
            f"users={self.users}",
            f"recall@{self.n}={self.recall!r}",
            f"hr@{self.n}={self.hr!r}",
            f"ndcg@{self.n}={self.ndcg!r}",
        ]
        if self.conc is None:
            out.append(f"conc@{self.n}=absent")
            out.append(f"div_all@{self.n}=absent")
            out.append(f"div_hit=absent")
        else:
            out.append(f"conc@{self.n}={self.conc!r}")
            out.append(f"div_all@{self.n}={self.div_all!r}")
            out.append(f"div_hit={self.div_hit}")
        out.append(f"skipped_users={self.skipped_users}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "users": self.users,
            "recall": self.recall,
            "hr": self.hr,
            "ndcg": self.ndcg,
            "conc": self.conc,
            "div_all": self.div_all,
            "div_hit": self.div_hit,
            "skipped_users": self.skipped_users,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
