"""Synthetic life-cycle behavior logs with planted interest structure.

Items scatter around interest centers in a latent space; each user holds a few
weighted interests and a history mixing on-interest items with uniform noise.
Impressions arrive after the history ends and are labeled by a logistic model
of the user's affinity to the target item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CATEGORICAL,
    CROSS,
    NUMERICAL,
    BehaviorSequence,
    Catalog,
    EmbeddingTables,
    FieldSpec,
    Schema,
    make_rng,
)

COHORTS = ("low", "medium", "high")
SECONDS_PER_DAY = 86_400


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 100
    n_items: int = 5000
    n_authors: int = 500
    n_interest_centers: int = 50
    id_dim: int = 32
    cross_dim: int = 8
    center_scale: float = 3.0
    item_spread: float = 0.6
    author_spread: float = 0.4
    # history length ~ lognormal(median, sigma) per cohort
    cohort_fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    cohort_medians: tuple[float, float, float] = (300.0, 2000.0, 10000.0)
    length_sigma: float = 0.4
    t_max: int = 100_000
    length_override: int | None = None
    min_interests: int = 1
    max_interests: int = 5
    interest_concentration: float = 1.0
    noise_fraction: float = 0.1
    # dormant interests never occur among the most recent ``dormant_window`` behaviors
    dormant_fraction: float = 0.0
    dormant_window: int = 200
    completion_base: float = 0.3
    completion_bonus: float = 0.35
    completion_noise: float = 0.15
    mean_gap_seconds: float = 3600.0
    impressions_per_user: int = 40
    on_interest_target_fraction: float = 0.5
    affinity: str = "weighted"  # or "max": every interest counts fully regardless of its weight
    label_weight: float = 8.0
    label_bias: float = -0.5
    label_noise: float = 0.5
    window_seconds: int = SECONDS_PER_DAY
    test_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_authors", "n_interest_centers", "id_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not math.isclose(sum(self.cohort_fractions), 1.0, abs_tol=1e-9):
            raise ValueError("cohort fractions must sum to 1")
        if not 1 <= self.min_interests <= self.max_interests <= self.n_interest_centers:
            raise ValueError("need 1 <= min_interests <= max_interests <= n_interest_centers")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must lie in [0, 1]")
        if self.affinity not in ("weighted", "max"):
            raise ValueError("affinity must be 'weighted' or 'max'")
        object.__setattr__(self, "cohort_fractions", tuple(self.cohort_fractions))
        object.__setattr__(self, "cohort_medians", tuple(self.cohort_medians))


def default_schema(n_items: int, n_authors: int, id_dim: int = 64, cross_dim: int = 8) -> Schema:
    return Schema(
        (
            FieldSpec("item_id", CATEGORICAL, n_items, id_dim),
            FieldSpec("author_id", CATEGORICAL, n_authors, id_dim),
            FieldSpec("duration", NUMERICAL),
            FieldSpec("completion", CROSS, 10, cross_dim),
            FieldSpec("age", CROSS, 16, cross_dim),
        )
    )


@dataclass
class Impressions:
    user_ids: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.user_ids.shape[0])

    def subset(self, mask) -> "Impressions":
        return Impressions(self.user_ids[mask], self.item_ids[mask], self.timestamps[mask], self.labels[mask])

    def __eq__(self, other):
        return isinstance(other, Impressions) and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("user_ids", "item_ids", "timestamps", "labels")
        )


@dataclass
class GroundTruth:
    centers: np.ndarray  # (n_centers, id_dim)
    item_center: np.ndarray  # (n_items,)
    item_latent: np.ndarray  # (n_items, id_dim)
    user_interests: list[np.ndarray]  # center ids per user
    user_weights: list[np.ndarray]  # matching interest weights
    user_cohort: np.ndarray  # (n_users,) index into COHORTS
    mode: str = "weighted"

    def affinity(self, user_ids, item_ids) -> np.ndarray:
        """Planted affinity in [0, 1] from ``c = max(0, cos(item latent, center))``
        over the user's interests: ``sum((weight / max weight) * c)`` in weighted
        mode, ``max(c)`` in max mode."""
        user_ids = np.asarray(user_ids)
        item_ids = np.asarray(item_ids)
        lat = self.item_latent[item_ids]
        lat = lat / np.linalg.norm(lat, axis=1, keepdims=True)
        cen = self.centers / np.linalg.norm(self.centers, axis=1, keepdims=True)
        out = np.empty(user_ids.shape[0])
        for i, (u, row) in enumerate(zip(user_ids, lat)):
            c = self.user_interests[u]
            sim = np.maximum(cen[c] @ row, 0.0)
            if self.mode == "max":
                out[i] = sim.max()
            else:
                out[i] = np.sum(self.user_weights[u] / self.user_weights[u].max() * sim)
        return np.minimum(out, 1.0)


@dataclass
class GeneratedData:
    config: GenConfig
    catalog: Catalog  # raw (unnormalized) numericals
    tables: EmbeddingTables  # pretrained id embeddings (stand-in for a trained model's tables)
    sequences: list[BehaviorSequence]
    impressions: Impressions
    cutoff: int  # impressions with timestamp >= cutoff form the test split
    truth: GroundTruth = field(repr=False)

    def train_test(self) -> tuple[Impressions, Impressions]:
        test = self.impressions.timestamps >= self.cutoff
        return self.impressions.subset(~test), self.impressions.subset(test)


def _unit_rows(rng, n, dim, scale):
    return rng.normal(0.0, scale / math.sqrt(dim), size=(n, dim))


def generate(cfg: GenConfig = GenConfig()) -> GeneratedData:
    rng = make_rng(cfg.seed, 0)
    dim = cfg.id_dim
    centers = _unit_rows(rng, cfg.n_interest_centers, dim, cfg.center_scale)
    author_center = np.arange(cfg.n_authors) % cfg.n_interest_centers
    author_latent = centers[author_center] + _unit_rows(rng, cfg.n_authors, dim, cfg.author_spread)
    item_center = rng.integers(cfg.n_interest_centers, size=cfg.n_items)
    item_latent = centers[item_center] + _unit_rows(rng, cfg.n_items, dim, cfg.item_spread)
    # each item's author comes from its center's author pool
    item_author = np.empty(cfg.n_items, dtype=np.int64)
    for c in range(cfg.n_interest_centers):
        pool = np.flatnonzero(author_center == c)
        members = np.flatnonzero(item_center == c)
        if pool.size == 0:
            pool = np.array([c % cfg.n_authors])
        item_author[members] = rng.choice(pool, size=members.size)
    duration = np.round(np.exp(rng.normal(math.log(60.0), 0.8, size=cfg.n_items)), 3)

    schema = default_schema(cfg.n_items, cfg.n_authors, dim, cfg.cross_dim)
    catalog = Catalog(schema, np.stack([np.arange(cfg.n_items), item_author], axis=1), duration[:, None])
    tables = EmbeddingTables({"item_id": item_latent, "author_id": author_latent})
    items_by_center = [np.flatnonzero(item_center == c) for c in range(cfg.n_interest_centers)]

    now = 400 * SECONDS_PER_DAY
    cutoff = now + int(round((1.0 - cfg.test_fraction) * cfg.window_seconds))
    seqs, interests, weights, cohorts = [], [], [], []
    imp_u, imp_i, imp_t = [], [], []
    for u in range(cfg.n_users):
        urng = make_rng(cfg.seed, 1, u)
        cohort = int(urng.choice(3, p=cfg.cohort_fractions))
        if cfg.length_override is not None:
            length = cfg.length_override
        else:
            length = int(round(math.exp(urng.normal(math.log(cfg.cohort_medians[cohort]), cfg.length_sigma))))
        length = int(min(max(length, 0), cfg.t_max))
        k = int(urng.integers(cfg.min_interests, cfg.max_interests + 1))
        centers_u = np.sort(urng.choice(cfg.n_interest_centers, size=k, replace=False))
        w = urng.dirichlet(np.full(k, cfg.interest_concentration))
        is_noise = urng.random(length) < cfg.noise_fraction
        which = urng.choice(k, size=length, p=w)
        dormant = urng.random(k) < cfg.dormant_fraction
        dormant[int(np.argmax(w))] = False
        if dormant.any() and length:
            recent = np.zeros(length, dtype=bool)
            recent[-cfg.dormant_window :] = True
            moved = recent & dormant[which]
            active = np.flatnonzero(~dormant)
            which[moved] = urng.choice(active, size=int(moved.sum()), p=w[active] / w[active].sum())
        items = np.empty(length, dtype=np.int64)
        for j in range(k):
            sel = (~is_noise) & (which == j)
            pool = items_by_center[centers_u[j]]
            if pool.size == 0:
                pool = np.arange(cfg.n_items)
            items[sel] = urng.choice(pool, size=int(sel.sum()))
        items[is_noise] = urng.integers(cfg.n_items, size=int(is_noise.sum()))
        p = cfg.completion_base + cfg.completion_bonus * (~is_noise) + urng.normal(0, cfg.completion_noise, length)
        p = np.clip(p, 0.0, 1.0)
        gaps = np.maximum(1, np.round(urng.exponential(cfg.mean_gap_seconds, size=length))).astype(np.int64)
        ts = now - np.cumsum(gaps)[::-1] if length else np.zeros(0, dtype=np.int64)
        seqs.append(BehaviorSequence(u, items, p, ts))
        interests.append(centers_u)
        weights.append(w)
        cohorts.append(cohort)

        n_imp = cfg.impressions_per_user
        on = urng.random(n_imp) < cfg.on_interest_target_fraction
        tgt = urng.integers(cfg.n_items, size=n_imp)
        pick = urng.integers(k, size=n_imp)
        for t in np.flatnonzero(on):
            pool = items_by_center[centers_u[pick[t]]]
            if pool.size:
                tgt[t] = urng.choice(pool)
        imp_u.append(np.full(n_imp, u, dtype=np.int64))
        imp_i.append(tgt)
        imp_t.append(np.sort(now + urng.integers(0, cfg.window_seconds, size=n_imp)))

    truth = GroundTruth(centers, item_center, item_latent, interests, weights, np.array(cohorts, dtype=np.int64), cfg.affinity)
    users = np.concatenate(imp_u) if imp_u else np.zeros(0, dtype=np.int64)
    items = np.concatenate(imp_i) if imp_i else np.zeros(0, dtype=np.int64)
    times = np.concatenate(imp_t) if imp_t else np.zeros(0, dtype=np.int64)
    labels = _labels(cfg, truth, users, items)
    return GeneratedData(cfg, catalog, tables, seqs, Impressions(users, items, times, labels), cutoff, truth)


def click_logit(cfg: GenConfig, affinity: np.ndarray) -> np.ndarray:
    return cfg.label_weight * (affinity + cfg.label_bias)


def _labels(cfg: GenConfig, truth: GroundTruth, users, items) -> np.ndarray:
    if users.size == 0:
        return np.zeros(0, dtype=np.int64)
    lrng = make_rng(cfg.seed, 2)
    aff = truth.affinity(users, items)
    logit = click_logit(cfg, aff) + lrng.normal(0.0, cfg.label_noise, size=aff.shape)
    prob = 1.0 / (1.0 + np.exp(-logit))
    return (lrng.random(aff.shape) < prob).astype(np.int64)


def bayes_scores(data: GeneratedData, impressions: Impressions | None = None) -> np.ndarray:
    """Scores from the true generative affinity (monotone in click probability)."""
    imp = impressions if impressions is not None else data.impressions
    return data.truth.affinity(imp.user_ids, imp.item_ids)
