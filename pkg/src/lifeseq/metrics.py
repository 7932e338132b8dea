"""Ranking and clustering-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .attention import gsu_topk
from .compressor import CompressedHistory
from .core import DEGENERATE_NORM


class UndefinedMetric(ValueError):
    """The metric is undefined for this input (e.g. a single label class)."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class GaucResult:
    value: float
    n_users: int
    skipped: int


def gauc(scores, labels, user_ids) -> GaucResult:
    """Impression-weighted mean of per-user AUC; single-class users are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    user_ids = np.asarray(user_ids)
    order = np.argsort(user_ids, kind="stable")
    uniq, starts = np.unique(user_ids[order], return_index=True)
    bounds = list(starts[1:]) + [order.shape[0]]
    total = weight = 0.0
    used = skipped = 0
    for lo, hi in zip(starts, bounds):
        idx = order[lo:hi]
        y = labels[idx]
        if y.min() == y.max():
            skipped += 1
            continue
        total += auc(scores[idx], y) * idx.shape[0]
        weight += idx.shape[0]
        used += 1
    if used == 0:
        raise UndefinedMetric(f"GAUC undefined: all {skipped} users are single-class")
    return GaucResult(total / weight, used, skipped)


@dataclass
class ClusterAccuracy:
    value: float
    n_items: int
    skipped: int


def cluster_accuracy(history: CompressedHistory | list[CompressedHistory], embeddings: np.ndarray) -> ClusterAccuracy:
    """Mean cosine of every member embedding to its cluster centroid; zero-norm
    members or centroids are skipped and counted. When every item is skipped the
    value is 0.0 with the skip count reported."""
    histories = history if isinstance(history, list) else [history]
    total = 0.0
    n = skipped = 0
    for h in histories:
        for c in h.clusters:
            x = embeddings[c.member_ids]
            cn = np.linalg.norm(c.centroid)
            xn = np.linalg.norm(x, axis=1)
            ok = (xn >= DEGENERATE_NORM) & (cn >= DEGENERATE_NORM)
            skipped += int((~ok).sum())
            if ok.any():
                cos = (x[ok] @ c.centroid) / (xn[ok] * cn)
                total += float(np.clip(cos, -1.0, 1.0).sum())
                n += int(ok.sum())
    if n == 0:
        if skipped == 0:
            raise UndefinedMetric("cluster accuracy needs at least one clustered item")
        return ClusterAccuracy(0.0, 0, skipped)
    return ClusterAccuracy(total / n, n, skipped)


def gsu_recall(
    history: CompressedHistory,
    item_scores: np.ndarray,
    cluster_scores: np.ndarray,
    k: int,
    truth_k: int | None = None,
) -> float:
    """Fraction of the top-(truth_k * mean cluster size) raw behaviors, ranked by
    item-level relevance, that fall inside the k clusters retrieved by
    ``cluster_scores``. ``item_scores`` is indexed by record position.

    ``truth_k`` defaults to ``k``. Holding it fixed makes recall nondecreasing in
    ``k``; when both grow together the reference set grows too and recall can drop.
    """
    t = history.source_length
    if t == 0 or len(history) == 0:
        return 1.0
    retrieved = gsu_topk(cluster_scores, k)
    covered = np.zeros(t, dtype=bool)
    for i in retrieved:
        covered[history.clusters[i].positions] = True
    m = min(t, int(math.ceil((k if truth_k is None else truth_k) * t / len(history))))
    truth = gsu_topk(item_scores, m)
    return float(covered[truth].mean())


def compression_ratio(histories: list[CompressedHistory]) -> float | None:
    t = sum(h.source_length for h in histories)
    return sum(len(h) for h in histories) / t if t else None


