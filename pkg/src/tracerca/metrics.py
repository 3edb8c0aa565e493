"""Ranking metrics for root-cause predictions.

All four metrics live in [0, 1]. ``rank`` is the 0-based position of a
component in the prediction list; a top-ranked single cause therefore has
rank 0.
"""

from __future__ import annotations

from typing import AbstractSet, Sequence


def pr_at_k(pred: Sequence[str], truth: AbstractSet[str], k: int) -> float:
    """Fraction of true causes found in the top-k predictions.

    Normalised by min(|truth|, k); predictions shorter than k contribute
    only their existing entries.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not truth:
        raise ValueError("truth set must be non-empty")
    hits = sum(1 for cid in pred[:k] if cid in truth)
    return hits / min(len(truth), k)


def pr_avg(pred: Sequence[str], truth: AbstractSet[str]) -> float:
    """Mean of pr_at_k over k = 1..5."""
    return sum(pr_at_k(pred, truth, k) for k in range(1, 6)) / 5.0


def rca_rank_score(pred: Sequence[str], truth: AbstractSet[str]) -> float:
    """Rank-position score rewarding true causes placed early.

    Each true cause v scores 1 - s(v), where s(v) = rank(v) / len(pred)
    when its 0-based rank is below |truth|, and 1 otherwise (including
    when v is absent from the predictions). An empty prediction list
    scores 0.
    """
    if not truth:
        raise ValueError("truth set must be non-empty")
    if not pred:
        return 0.0
    n = len(pred)
    position = {cid: i for i, cid in enumerate(pred)}
    total = 0.0
    for v in sorted(truth):
        rank = position.get(v)
        s = rank / n if rank is not None and rank < len(truth) else 1.0
        total += 1.0 - s
    return total / len(truth)


def hit_root_cause(kept: AbstractSet[str], truth: AbstractSet[str]) -> float:
    """Recall of the pruning stage: fraction of true causes that survived."""
    if not truth:
        raise ValueError("truth set must be non-empty")
    return len(set(kept) & set(truth)) / len(truth)
