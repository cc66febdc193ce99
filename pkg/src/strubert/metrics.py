"""Ranking and classification metrics."""

from __future__ import annotations

import logging
import math
from typing import Mapping, Sequence

import numpy as np

LOG = logging.getLogger(__name__)


def dcg(grades: Sequence[int], k: int) -> float:
    return sum((2.0**g - 1.0) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def ndcg_at_k(ranked_grades: Sequence[int], judged_grades: Sequence[int], k: int) -> float | None:
    """Gain ``2^g - 1``, discount ``1/log2(rank + 1)``. ``None`` when no judged item is relevant."""
    ideal = dcg(sorted(judged_grades, reverse=True), k)
    if ideal == 0.0:
        return None
    return dcg(ranked_grades, k) / ideal


def reciprocal_rank(ranked_grades: Sequence[int]) -> float:
    for i, g in enumerate(ranked_grades):
        if g >= 1:
            return 1.0 / (i + 1)
    return 0.0


def average_precision(ranked_grades: Sequence[int], n_relevant: int | None = None) -> float | None:
    if n_relevant is None:
        n_relevant = sum(g >= 1 for g in ranked_grades)
    if n_relevant == 0:
        return None
    hits = 0
    total = 0.0
    for i, g in enumerate(ranked_grades):
        if g >= 1:
            hits += 1
            total += hits / (i + 1)
    return total / n_relevant


def rank_by_score(scores: Mapping[str, float]) -> list[str]:
    """Descending score; ties broken by id so rankings are reproducible."""
    return sorted(scores, key=lambda t: (-scores[t], t))


def retrieval_metrics(rankings: Mapping[str, Sequence[str]], qrels: Mapping[str, Mapping[str, int]],
                      k: int = 5) -> dict:
    """Mean NDCG@k, MRR and MAP over queries that have at least one relevant item.

    Unjudged ranked items count as grade 0.
    """
    ndcgs, rrs, aps = [], [], []
    skipped = []
    for qid, ranked in rankings.items():
        judged = qrels.get(qid, {})
        grades = [judged.get(t, 0) for t in ranked]
        n_rel = sum(g >= 1 for g in judged.values())
        if n_rel == 0:
            skipped.append(qid)
            continue
        ndcgs.append(ndcg_at_k(grades, list(judged.values()), k))
        rrs.append(reciprocal_rank(grades))
        aps.append(average_precision(grades, n_rel))
    if skipped:
        LOG.info("excluded %d queries without relevant tables: %s", len(skipped), skipped[:5])
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return {f"ndcg@{k}": mean(ndcgs), "mrr": mean(rrs), "map": mean(aps),
            "queries": len(ndcgs), "excluded": len(skipped)}


def classification_metrics(preds: Sequence[int], labels: Sequence[int]) -> dict:
    """Macro precision/recall/F over classes {0, 1}, plus accuracy.

    A class whose precision or recall is undefined gets 0 for that value.
    """
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError("predictions and labels must be nonempty and equal length")
    ps, rs, fs = [], [], []
    for c in (0, 1):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    return {"precision": float(np.mean(ps)), "recall": float(np.mean(rs)),
            "f1": float(np.mean(fs)), "accuracy": float(np.mean(preds == labels))}


def expected_random_ndcg(qrels: Mapping[str, Mapping[str, int]], k: int = 5) -> float:
    """Exact mean NDCG@k under uniformly random orderings of each query's judged items.

    Every rank position holds each item with equal probability, so expected
    DCG is the mean gain times the summed discounts of the first ``k`` ranks.
    """
    per_query = []
    for judged in qrels.values():
        grades = list(judged.values())
        if not any(g >= 1 for g in grades):
            continue
        mean_gain = float(np.mean([2.0**g - 1.0 for g in grades]))
        discounts = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(grades))))
        per_query.append(mean_gain * discounts / dcg(sorted(grades, reverse=True), k))
    return float(np.mean(per_query))


def simulate_random_ndcg(qrels: Mapping[str, Mapping[str, int]], k: int = 5, trials: int = 2000,
                         seed: int = 0) -> float:
    """Monte Carlo counterpart of :func:`expected_random_ndcg`."""
    rng = np.random.default_rng(seed)
    per_query = []
    for judged in qrels.values():
        grades = list(judged.values())
        if not any(g >= 1 for g in grades):
            continue
        total = 0.0
        for _ in range(trials):
            order = rng.permutation(len(grades))
            total += ndcg_at_k([grades[i] for i in order], grades, k)
        per_query.append(total / trials)
    return float(np.mean(per_query))
