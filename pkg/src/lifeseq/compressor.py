"""Hierarchical clustering of a life-cycle behavior sequence into clusters.

Records are first bucketed by playing-completion ratio, then each bucket is
split recursively with k-means until every cluster holds fewer than ``gamma``
behaviors. Two ablation variants fix the split count at 2, one of them also
forcing the two halves to equal size.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .core import BehaviorSequence, DataError, make_rng

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    ADAPTIVE = "adaptive"
    BINARY = "binary"
    BALANCED_BINARY = "balanced_binary"


@dataclass(frozen=True)
class CompressorConfig:
    n_groups: int = 5
    gamma: int = 20
    variant: Variant = Variant.ADAPTIVE
    kmeans_max_iters: int = 50
    kmeans_seed: int = 0
    kmeans_n_init: int = 1
    max_depth: int = 40

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")
        if self.gamma < 2:
            raise ValueError("gamma must be >= 2")
        if self.kmeans_n_init < 1:
            raise ValueError("kmeans_n_init must be >= 1")
        object.__setattr__(self, "variant", Variant(self.variant))


@dataclass(eq=False)
class Cluster:
    member_ids: np.ndarray  # item ids, in record order
    positions: np.ndarray  # indices into the source sequence's records
    centroid: np.ndarray
    group_id: int

    @property
    def size(self) -> int:
        return int(self.member_ids.shape[0])

    def __eq__(self, other):
        return (
            isinstance(other, Cluster)
            and self.group_id == other.group_id
            and np.array_equal(self.member_ids, other.member_ids)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.centroid, other.centroid)
        )


@dataclass(eq=False)
class CompressedHistory:
    user_id: int
    source_length: int
    clusters: list[Cluster] = field(default_factory=list)
    depth_cap_hits: int = 0
    split_depth: int = 0  # most k-means split rounds on any path to an emitted cluster

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters], dtype=np.int64)

    @property
    def ratio(self) -> float | None:
        return len(self.clusters) / self.source_length if self.source_length else None

    def __eq__(self, other):
        return (
            isinstance(other, CompressedHistory)
            and self.user_id == other.user_id
            and self.source_length == other.source_length
            and len(self.clusters) == len(other.clusters)
            and all(a == b for a, b in zip(self.clusters, other.clusters))
        )


def get_group(p: float, n_groups: int) -> int:
    """Equal-width completion-ratio bucket in ``1..n_groups``."""
    return min(int(math.floor(p * n_groups)) + 1, n_groups)


def get_groups(p: np.ndarray, n_groups: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.minimum(np.floor(p * n_groups).astype(np.int64) + 1, n_groups)


def adaptive_delta(n_items: int, gamma: int = 20) -> int:
    """Number of k-means clusters used to split a list of ``n_items``: floor(n^0.3).

    Lists shorter than ``gamma`` are never split, so they are rejected here.
    The result is at least 2 so that every split makes progress.
    """
    if n_items < gamma:
        raise ValueError(f"adaptive_delta called with {n_items} < gamma={gamma}; list must not be split")
    d = int(math.floor(n_items**0.3))
    # float pow can land just under an exact integer root
    while (d + 1) ** 10 <= n_items**3:
        d += 1
    return max(d, 2)


def _sq_dists(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator, x_sq: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = _sq_dists(x, x[idx], x_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]], x_sq)[:, 0])
    return x[idx].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> None:
    """Give each empty cluster the point farthest from the centroid of the largest cluster."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        d = np.sum((x[members] - centroids[big]) ** 2, axis=1)
        far = members[int(np.argmax(d))]
        labels[far] = j
        centroids[j] = x[far]
        counts[big] -= 1
        counts[j] += 1


def _update_centroids(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / counts[:, None]


def _rebalance(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> None:
    """Move points from the larger of two clusters to the smaller one, those nearest
    the smaller cluster's centroid first, until sizes differ by at most one."""
    counts = np.bincount(labels, minlength=2)
    big = 0 if counts[0] >= counts[1] else 1
    small = 1 - big
    n_move = (counts[big] - counts[small]) // 2
    if n_move <= 0:
        return
    members = np.flatnonzero(labels == big)
    d = np.sum((x[members] - centroids[small]) ** 2, axis=1)
    order = np.argsort(d, kind="stable")
    labels[members[order[:n_move]]] = small


def kmeans_labels(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 50,
    balanced: bool = False,
    n_init: int = 1,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns labels in ``0..k-1``,
    every label used at least once. ``balanced`` (k=2 only) rebalances sizes
    after every assignment step. With ``n_init > 1`` the lowest-SSE of that many
    seeded runs is kept (earliest run on ties)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if balanced and k != 2:
        raise ValueError("balanced k-means is defined for k=2 only")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if np.all(x == x[0]):
        # no geometry to split on; contiguous chunks keep the split deterministic and non-degenerate
        labels = np.empty(n, dtype=np.int64)
        for j, chunk in enumerate(np.array_split(np.arange(n), k)):
            labels[chunk] = j
        return labels
    x_sq = np.einsum("ij,ij->i", x, x)
    best, best_sse = None, math.inf
    for _ in range(max(1, n_init)):
        labels = _lloyd(x, k, rng, max_iters, balanced, x_sq)
        centroids = _update_centroids(x, labels, k)
        sse = float(np.sum((x - centroids[labels]) ** 2))
        if sse < best_sse:
            best, best_sse = labels, sse
    return best


def _lloyd(x, k, rng, max_iters, balanced, x_sq) -> np.ndarray:
    centroids = _plusplus(x, k, rng, x_sq)
    labels = None
    for _ in range(max_iters):
        new = np.argmin(_sq_dists(x, centroids, x_sq), axis=1)
        _repair_empty(x, new, centroids, k)
        if balanced:
            _rebalance(x, new, centroids)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = _update_centroids(x, labels, k)
    return labels


def kmeans(
    k: int,
    items,
    embeddings: np.ndarray,
    rng: np.random.Generator,
    max_iters: int = 50,
    balanced: bool = False,
    n_init: int = 10,
) -> list[list[int]]:
    """Cluster ``items`` (catalog ids) by their rows in ``embeddings`` into ``k``
    non-empty member lists, keeping the best of ``n_init`` seeded runs. The
    compressor calls :func:`kmeans_labels` directly with its own restart count."""
    items = np.asarray(items, dtype=np.int64)
    if k > items.shape[0]:
        raise ValueError(f"k={k} exceeds number of items {items.shape[0]}")
    _check_ids(items, embeddings)
    labels = kmeans_labels(embeddings[items], k, rng, max_iters, balanced, n_init)
    return [items[labels == j].tolist() for j in range(k)]


def _check_ids(items: np.ndarray, embeddings: np.ndarray) -> None:
    if items.size == 0:
        return
    bad = items[(items < 0) | (items >= embeddings.shape[0])]
    if bad.size:
        raise DataError(f"item id {int(bad[0])} has no embedding")


def compress(seq: BehaviorSequence, embeddings: np.ndarray, cfg: CompressorConfig = CompressorConfig()):
    """Compress ``seq`` into clusters. ``embeddings`` holds one row per catalog item."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    item_ids = seq.item_ids
    _check_ids(item_ids, embeddings)
    history = CompressedHistory(seq.user_id, len(seq))
    if len(seq) == 0:
        return history

    rng = make_rng(cfg.kmeans_seed, seq.user_id)
    x = embeddings[item_ids]
    groups = get_groups(seq.completion_ratios, cfg.n_groups)
    variant = cfg.variant

    for m in range(1, cfg.n_groups + 1):
        queue = deque([(np.flatnonzero(groups == m), 0)])
        while queue:
            pos, depth = queue.popleft()
            if pos.size == 0:
                continue
            if pos.size < cfg.gamma:
                history.clusters.append(_make_cluster(pos, item_ids, x, m))
                history.split_depth = max(history.split_depth, depth)
                continue
            if depth >= cfg.max_depth:
                history.depth_cap_hits += 1
                history.split_depth = max(history.split_depth, depth)
                log.warning("user %s: recursion depth cap hit on %d items", seq.user_id, pos.size)
                for chunk in np.array_split(pos, math.ceil(pos.size / (cfg.gamma - 1))):
                    history.clusters.append(_make_cluster(chunk, item_ids, x, m))
                continue
            if variant is Variant.ADAPTIVE:
                delta = adaptive_delta(pos.size, cfg.gamma)
            else:
                delta = 2
            labels = kmeans_labels(
                x[pos], delta, rng, cfg.kmeans_max_iters, variant is Variant.BALANCED_BINARY, cfg.kmeans_n_init
            )
            for j in range(delta):
                queue.append((pos[labels == j], depth + 1))
    return history


def compress_binary(seq, embeddings, cfg: CompressorConfig = CompressorConfig()):
    return compress(seq, embeddings, _with_variant(cfg, Variant.BINARY))


def compress_balanced_binary(seq, embeddings, cfg: CompressorConfig = CompressorConfig()):
    return compress(seq, embeddings, _with_variant(cfg, Variant.BALANCED_BINARY))


def _with_variant(cfg: CompressorConfig, variant: Variant) -> CompressorConfig:
    return replace(cfg, variant=variant)


def _make_cluster(pos: np.ndarray, item_ids: np.ndarray, x: np.ndarray, group: int) -> Cluster:
    return Cluster(
        member_ids=item_ids[pos].copy(),
        positions=pos.astype(np.int64),
        centroid=x[pos].mean(axis=0),
        group_id=group,
    )
