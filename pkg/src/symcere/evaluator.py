"""All-ranking evaluation: every item the user has not consumed in training
is a candidate, scored by inner product of unit-normalized representations.

Macro averaging: metrics are computed per user, then averaged over users
that hold at least one test interaction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionSet
from .losses import l2_normalize


def rank_items(
    table: np.ndarray,
    user: int,
    exclude: frozenset[int] | set[int],
    num_users: int,
    normalize: bool = True,
) -> np.ndarray:
    """All candidate items ordered by descending score.

    Ties break deterministically toward the smaller item index.  Items in
    `exclude` (the user's training items) never appear.  With normalize off,
    raw inner products are used; the interface stays identical so ablations
    differ only in geometry.
    """
    table = np.asarray(table, dtype=np.float64)
    num_items = table.shape[0] - num_users
    user_vec = table[user]
    item_block = table[num_users:]
    if normalize:
        user_vec = l2_normalize(user_vec)
        item_block = l2_normalize(item_block)
    scores = item_block @ user_vec

    candidates = np.setdiff1d(
        np.arange(num_items, dtype=np.int64),
        np.fromiter(exclude, dtype=np.int64, count=len(exclude)),
        assume_unique=True,
    )
    cand_scores = scores[candidates]
    # lexsort: last key is primary, so order by -score then candidate index
    order = np.lexsort((candidates, -cand_scores))
    return candidates[order]


def hr_at_k(ranked: np.ndarray, truth: set[int] | frozenset[int], k: int) -> float:
    """1.0 when any held-out item appears in the top k, else 0.0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not truth:
        raise ValueError("empty ground-truth set")
    top = ranked[:k]
    return 1.0 if any(int(v) in truth for v in top) else 0.0


def ndcg_at_k(ranked: np.ndarray, truth: set[int] | frozenset[int], k: int) -> float:
    """Binary-relevance NDCG: DCG uses 1/log2(position + 1) at 1-based
    positions; the ideal DCG places min(k, |truth|) hits at the top."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not truth:
        raise ValueError("empty ground-truth set")
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if int(item) in truth:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(k, len(truth)) + 1))
    return dcg / ideal


@dataclass
class MetricsReport:
    """Ranking quality plus the bookkeeping needed to interpret it."""

    k_values: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users_evaluated: int
    num_users_skipped: int
    averaging: str = "macro: per-user metric, mean over users with test items"
    # optional detail: per evaluated user, the 1-based rank of each test item
    truth_ranks: dict[int, list[int]] | None = field(default=None, repr=False)

    def to_lines(self) -> str:
        lines = [
            f"users evaluated\t{self.num_users_evaluated}",
            f"users skipped (no test items)\t{self.num_users_skipped}",
            f"averaging\t{self.averaging}",
        ]
        for k in self.k_values:
            lines.append(f"HR@{k}\t{self.hr[k]:.6f}")
            lines.append(f"NDCG@{k}\t{self.ndcg[k]:.6f}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        lines = ["k\thr\tndcg"]
        for k in self.k_values:
            lines.append(f"{k}\t{self.hr[k]:.6f}\t{self.ndcg[k]:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "k_values": self.k_values,
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "num_users_evaluated": self.num_users_evaluated,
            "num_users_skipped": self.num_users_skipped,
            "averaging": self.averaging,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_all(
    table: np.ndarray,
    dataset: InteractionSet,
    k_values: list[int],
    normalize: bool = True,
    want_ranks: bool = False,
) -> MetricsReport:
    """Rank for every user with held-out interactions and macro-average.

    Users whose entire history landed in training are skipped and counted.
    Cold items (test-only) are candidates like any other.
    """
    if not k_values:
        raise ValueError("need at least one cutoff")
    k_values = sorted(set(int(k) for k in k_values))
    truth_per_user = dataset.user_test_items()

    hr_sums = {k: 0.0 for k in k_values}
    ndcg_sums = {k: 0.0 for k in k_values}
    evaluated = 0
    skipped = 0
    ranks: dict[int, list[int]] = {}
    for u in range(dataset.num_users):
        truth = set(truth_per_user[u])
        if not truth:
            skipped += 1
            continue
        ranked = rank_items(
            table, u, dataset.user_train_items[u], dataset.num_users, normalize
        )
        for k in k_values:
            hr_sums[k] += hr_at_k(ranked, truth, k)
            ndcg_sums[k] += ndcg_at_k(ranked, truth, k)
        if want_ranks:
            position = {int(v): p for p, v in enumerate(ranked.tolist(), start=1)}
            ranks[u] = sorted(position[v] for v in truth)
        evaluated += 1

    if evaluated == 0:
        raise ValueError("no user has test interactions; nothing to evaluate")
    return MetricsReport(
        k_values=k_values,
        hr={k: hr_sums[k] / evaluated for k in k_values},
        ndcg={k: ndcg_sums[k] / evaluated for k in k_values},
        num_users_evaluated=evaluated,
        num_users_skipped=skipped,
        truth_ranks=ranks if want_ranks else None,
    )
