"""Virtual-item representation of a cluster.

Numerical features are averaged over members; categorical features are copied
from the single member whose embedding lies closest to the cluster centroid.
Cross (user-item) statistics of the member behaviors ride along as averages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compressor import Cluster, CompressedHistory
from .core import BehaviorSequence, Catalog

# cross statistics carried per cluster, in this order
CROSS_STATS = ("completion_ratio", "age")


@dataclass(frozen=True, eq=False)
class VirtualItem:
    categorical: np.ndarray  # (N1,) category indices of the donor
    numerical: np.ndarray  # (N2,) member means
    cross: np.ndarray  # (len(CROSS_STATS),) member means; empty if no sequence was given
    source_item_id: int
    size: int

    def __eq__(self, other):
        return (
            isinstance(other, VirtualItem)
            and self.source_item_id == other.source_item_id
            and self.size == other.size
            and np.array_equal(self.categorical, other.categorical)
            and np.array_equal(self.numerical, other.numerical)
            and np.array_equal(self.cross, other.cross)
        )


def numerical_repr(cluster: Cluster, catalog: Catalog) -> np.ndarray:
    if cluster.size == 0:
        raise ValueError("empty cluster")
    catalog.check_ids(cluster.member_ids)
    return catalog.numerical[cluster.member_ids].mean(axis=0)


def categorical_repr(cluster: Cluster, embeddings: np.ndarray, catalog: Catalog) -> tuple[np.ndarray, int]:
    """Donor = member minimizing squared distance to the centroid; ties go to the lowest item id."""
    if cluster.size == 0:
        raise ValueError("empty cluster")
    catalog.check_ids(cluster.member_ids)
    ids = cluster.member_ids
    d = np.sum((embeddings[ids] - cluster.centroid) ** 2, axis=1)
    best = d.min()
    donor = int(ids[d == best].min())
    return catalog.categorical[donor].copy(), donor


def cross_repr(cluster: Cluster, seq: BehaviorSequence) -> np.ndarray:
    """Mean completion ratio and mean age (time before the user's last behavior) of members."""
    p = seq.completion_ratios[cluster.positions]
    ts = seq.timestamps
    age = (ts[-1] - ts[cluster.positions]).astype(np.float64)
    return np.array([p.mean(), age.mean()])


def build_virtual_items(
    history: CompressedHistory,
    catalog: Catalog,
    embeddings: np.ndarray,
    seq: BehaviorSequence | None = None,
) -> list[VirtualItem]:
    out = []
    for c in history.clusters:
        cat, donor = categorical_repr(c, embeddings, catalog)
        cross = cross_repr(c, seq) if seq is not None else np.zeros(0)
        out.append(VirtualItem(cat, numerical_repr(c, catalog), cross, donor, c.size))
    return out
