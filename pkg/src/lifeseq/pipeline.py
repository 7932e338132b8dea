"""Offline compression for all users and the training/serving dataset built on it."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cluster_repr import VirtualItem, build_virtual_items
from .compressor import CompressedHistory, CompressorConfig, compress
from .core import BehaviorSequence, Catalog, EmbeddingTables, item_embeddings
from .datagen import Impressions
from .model import RECENT, Batch, HistoryUnits, ModelConfig, pad_units, pooling_row, units_from_raw, units_from_virtual_items


@dataclass
class CompressedUser:
    history: CompressedHistory
    virtual_items: list[VirtualItem]
    seconds: float


def _compress_one(args) -> CompressedUser:
    seq, embeddings, catalog, cfg = args
    start = time.perf_counter()
    hist = compress(seq, embeddings, cfg)
    vitems = build_virtual_items(hist, catalog, embeddings, seq)
    return CompressedUser(hist, vitems, time.perf_counter() - start)


def compress_all(
    sequences: list[BehaviorSequence],
    embeddings: np.ndarray,
    catalog: Catalog,
    cfg: CompressorConfig = CompressorConfig(),
    workers: int = 1,
) -> list[CompressedUser]:
    """Compress every user; output order follows ``sequences`` regardless of ``workers``."""
    jobs = [(s, embeddings, catalog, cfg) for s in sequences]
    if workers <= 1 or len(jobs) <= 1:
        return [_compress_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_compress_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def clustering_embeddings(catalog: Catalog, tables: EmbeddingTables) -> np.ndarray:
    """Item vectors used for clustering: inherent embedding of every catalog item."""
    return item_embeddings(catalog, tables)


class ImpressionData:
    """Labeled impressions plus per-user history inputs, batched on demand."""

    def __init__(
        self,
        catalog: Catalog,
        impressions: Impressions,
        sequences: list[BehaviorSequence],
        cluster_units: list[HistoryUnits] | None,
        n_users: int | None = None,
    ):
        self.catalog = catalog
        self.impressions = impressions
        self.n_users = n_users if n_users is not None else len(sequences)
        by_user = {s.user_id: s for s in sequences}
        empty = BehaviorSequence(0)
        n_items = len(catalog)
        seqs = [by_user.get(u, empty) for u in range(self.n_users)]
        self.sequence_length = np.array([len(s) for s in seqs], dtype=np.int64)
        self.recent_pool = sp.vstack([pooling_row(s, n_items, RECENT) for s in seqs]).tocsr()
        self.full_pool = sp.vstack([pooling_row(s, n_items) for s in seqs]).tocsr()
        self.recent_units = [units_from_raw(s, catalog, RECENT) for s in seqs]
        self.cluster_units = cluster_units

    def __len__(self) -> int:
        return len(self.impressions)

    def subset(self, impressions: Impressions) -> "ImpressionData":
        out = object.__new__(ImpressionData)
        out.__dict__.update(self.__dict__)
        out.impressions = impressions
        return out

    def batch(self, idx, cfg: ModelConfig) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        imp = self.impressions
        users = imp.user_ids[idx]
        items = imp.item_ids[idx]
        if cfg.history == "clusters":
            if self.cluster_units is None:
                raise ValueError("dataset has no compressed histories")
            units = [self.cluster_units[u] for u in users]
        elif cfg.history == "recent":
            units = [self.recent_units[u] for u in users]
        else:
            units = [self.recent_units[u].take([]) for u in users]
        cat, num, cross, sizes, mask = pad_units(units, self.catalog.schema)
        return Batch(
            users=users,
            target_cat=self.catalog.categorical[items],
            target_num=self.catalog.numerical[items],
            unit_cat=cat,
            unit_num=num,
            unit_cross=cross,
            unit_sizes=sizes,
            unit_mask=mask,
            recent_pool=self.recent_pool[users],
            full_pool=self.full_pool[users] if cfg.history == "avgpool" else None,
            labels=imp.labels[idx].astype(np.float64),
        )

    def predict(self, model, batch_size: int = 512) -> np.ndarray:
        out = np.empty(len(self))
        for lo in range(0, len(self), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(self)))
            out[idx] = model.predict(self.batch(idx, model.cfg), self.catalog)
        return out


def cluster_units_for(compressed: list[CompressedUser], catalog: Catalog) -> list[HistoryUnits]:
    return [units_from_virtual_items(c.virtual_items, catalog.schema) for c in compressed]
