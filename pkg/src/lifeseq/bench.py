"""Micro-benchmarks: compression, GSU over clusters vs raw items, ESU, cached projection."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    InherentCache,
    SplitEmbeddings,
    esu_head,
    gsu_scores,
    gsu_topk,
    project_inherent,
)
from .cluster_repr import build_virtual_items
from .compressor import CompressorConfig, compress
from .core import BehaviorSequence, Catalog, EmbeddingTables, make_rng
from .model import units_from_raw, units_from_virtual_items


@dataclass
class Timing:
    name: str
    median_s: float
    runs: int
    work: int  # rows processed per run

    @property
    def rows_per_s(self) -> float:
        return self.work / self.median_s if self.median_s > 0 else float("inf")


def measure(name: str, fn, work: int, repeats: int = 7, warmup: int = 2) -> Timing:
    """Median wall time of ``fn()`` over ``repeats`` runs after ``warmup`` unrecorded runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return Timing(name, statistics.median(times), repeats, work)


def _split(units, tables: EmbeddingTables, schema) -> SplitEmbeddings:
    parts = [tables[f.name][units.cat[:, j]] for j, f in enumerate(schema.categorical)]
    parts.append(units.num)
    kh = np.concatenate(parts, axis=1)
    cross = [tables[f.name][units.cross[:, j]] for j, f in enumerate(schema.cross)]
    kc = np.concatenate(cross, axis=1) if cross else np.zeros((len(units), 0))
    return SplitEmbeddings(kh, kc)


def run(
    sequences,
    catalog: Catalog,
    tables: EmbeddingTables,
    embeddings: np.ndarray,
    comp: CompressorConfig = CompressorConfig(),
    users: int = 20,
    targets: int = 64,
    topk: int = 100,
    repeats: int = 7,
    warmup: int = 2,
    seed: int = 0,
) -> list[Timing]:
    """Time each stage on the longest ``users`` histories.

    ``tables`` must hold a row table for every categorical and cross field.
    """
    schema = catalog.schema
    rng = make_rng(seed, 0xBE4C)
    chosen = sorted(sequences, key=lambda s: (-len(s), s.user_id))[: max(1, users)]
    chosen = [s for s in chosen if len(s)] or chosen[:1]
    total_t = sum(len(s) for s in chosen)

    hist = {}

    def do_compress():
        for s in chosen:
            hist[s.user_id] = compress(s, embeddings, comp)

    out = [measure("compress", do_compress, total_t, repeats=max(1, repeats // 2), warmup=min(warmup, 1))]

    raw = {s.user_id: _split(units_from_raw(s, catalog), tables, schema) for s in chosen}
    clus = {}
    for s in chosen:
        vitems = build_virtual_items(hist[s.user_id], catalog, embeddings, s)
        u = units_from_virtual_items(vitems, schema)
        clus[s.user_id] = (_split(u, tables, schema), u.sizes.astype(np.float64))
    inherent_dim = raw[chosen[0].user_id].kh.shape[1]
    n_cross = len(schema.cross)
    cross_dim = schema.cross[0].dim if n_cross else 1
    params = AttentionParams.init(inherent_dim, n_cross, cross_dim, rng)
    picks = rng.integers(0, len(catalog), size=max(1, targets))
    q_all = _split(units_from_raw_items(catalog, picks), tables, schema).kh

    n_hat = sum(len(clus[s.user_id][0]) for s in chosen)

    def gsu_items():
        for q in q_all:
            for s in chosen:
                gsu_scores(q, raw[s.user_id], params, np.ones(len(s)), reweight=False)

    def gsu_clusters():
        for q in q_all:
            for s in chosen:
                split, sizes = clus[s.user_id]
                gsu_scores(q, split, params, sizes)

    out.append(measure("gsu_items", gsu_items, total_t * len(q_all), repeats, warmup))
    out.append(measure("gsu_clusters", gsu_clusters, n_hat * len(q_all), repeats, warmup))

    top = {}
    for s in chosen:
        split, sizes = clus[s.user_id]
        sc = gsu_scores(q_all[0], split, params, sizes)
        idx = gsu_topk(sc, topk)
        top[s.user_id] = (split.take(idx), sizes[idx])

    def esu():
        for q in q_all:
            for s in chosen:
                split, sizes = top[s.user_id]
                for head in params.heads:
                    esu_head(q, split, head, sizes)

    out.append(measure("esu", esu, sum(len(v[0]) for v in top.values()) * len(q_all), repeats, warmup))

    # repeated-item workload: every target re-projects the same raw histories
    wh = params.heads[0].wh
    keys = {s.user_id: np.asarray(s.item_ids, dtype=np.int64) for s in chosen}

    def uncached():
        for _ in q_all:
            for s in chosen:
                project_inherent(raw[s.user_id].kh, wh)

    cache = InherentCache()

    def cached():
        for _ in q_all:
            for s in chosen:
                project_inherent(raw[s.user_id].kh, wh, cache, keys[s.user_id], version=0)

    out.append(measure("inherent_uncached", uncached, total_t * len(q_all), repeats, warmup))
    out.append(measure("inherent_cached", cached, total_t * len(q_all), repeats, warmup))
    return out


def units_from_raw_items(catalog: Catalog, items):
    items = np.asarray(items, dtype=np.int64)
    seq = BehaviorSequence(0, items, np.ones(items.size), np.zeros(items.size, dtype=np.int64))
    return units_from_raw(seq, catalog)


def speedups(timings: list[Timing]) -> dict[str, float]:
    t = {x.name: x.median_s for x in timings}
    out = {}
    if "gsu_items" in t and "gsu_clusters" in t:
        out["gsu_clusters_vs_items"] = t["gsu_items"] / t["gsu_clusters"]
    if "inherent_uncached" in t and "inherent_cached" in t:
        out["inherent_cached_vs_uncached"] = t["inherent_uncached"] / t["inherent_cached"]
    return out


def format_table(timings: list[Timing]) -> str:
    lines = [f"{'stage':<20} {'median_ms':>12} {'runs':>5} {'rows':>10} {'rows_per_s':>14}"]
    for x in timings:
        lines.append(f"{x.name:<20} {x.median_s * 1e3:>12.3f} {x.runs:>5d} {x.work:>10d} {x.rows_per_s:>14.1f}")
    for k, v in speedups(timings).items():
        lines.append(f"{k}: {v:.2f}x")
    return "\n".join(lines)
