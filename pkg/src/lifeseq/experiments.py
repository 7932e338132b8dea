"""Evaluation reports, baselines and the desk-scale ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .compressor import CompressorConfig, Variant
from .core import BehaviorSequence, Catalog
from .datagen import COHORTS, GenConfig, GeneratedData, bayes_scores, generate
from .metrics import UndefinedMetric, auc, cluster_accuracy, compression_ratio, gauc, gsu_recall
from .model import CtrModel, ModelConfig, TrainConfig, train, units_from_raw
from .pipeline import CompressedUser, ImpressionData, clustering_embeddings, cluster_units_for, compress_all

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1

# Named synthetic setups. ``planted``: many interests per user, half of them absent
# from recent history, so only long-term retrieval sees them. ``size_skew``: skewed
# interest weights under heavy uniform noise and no completion-ratio signal, so
# interest strength shows up mainly as cluster size. ``mixture50``: long histories
# over the 50-center mixture for the clustering-variant comparison.
PRESETS: dict[str, dict] = {
    "default": {},
    "planted": dict(
        n_users=2000,
        impressions_per_user=12,
        cohort_medians=(100.0, 400.0, 1500.0),
        id_dim=16,
        min_interests=3,
        max_interests=10,
        interest_concentration=0.5,
        affinity="max",
        dormant_fraction=0.5,
    ),
    "size_skew": dict(
        n_users=1000,
        impressions_per_user=12,
        cohort_medians=(100.0, 400.0, 1500.0),
        id_dim=16,
        item_spread=0.3,
        min_interests=2,
        max_interests=6,
        interest_concentration=0.3,
        affinity="weighted",
        noise_fraction=0.6,
        completion_bonus=0.0,
        dormant_fraction=0.5,
    ),
    "mixture50": dict(
        n_users=20,
        n_interest_centers=50,
        min_interests=5,
        max_interests=50,
        cohort_fractions=(0.0, 0.0, 1.0),
        cohort_medians=(2000.0, 5000.0, 10000.0),
        length_sigma=0.0,
        noise_fraction=0.0,
        impressions_per_user=1,
    ),
}

# desk-scale model/training used by the experiment presets
DESK_MODEL = ModelConfig(d_k=16, d_v=16, d_out=16, topk=20)
DESK_TRAIN = TrainConfig(epochs=4, lr=2e-3, batch_size=256)


def preset(name: str, **overrides) -> GenConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GenConfig(**{**PRESETS[name], **overrides})


@dataclass
class EvalReport:
    name: str
    auc: float | None
    gauc: float | None
    gauc_skipped_users: int
    cohort_gauc: dict[str, float | None]
    cluster_accuracy: float | None
    gsu_recall: float | None
    compression_ratio: float | None
    n_test: int
    runtimes: dict[str, float] = field(default_factory=dict)

    def to_json(self, with_runtimes: bool = False) -> dict:
        d = asdict(self)
        if not with_runtimes:
            d.pop("runtimes")
        return d


@dataclass
class Prepared:
    """Generated data with histories compressed and train/test datasets built."""

    data: GeneratedData | None
    catalog: Catalog
    sequences: list[BehaviorSequence]
    embeddings: np.ndarray
    compressed: list[CompressedUser]
    train: ImpressionData
    test: ImpressionData
    compress_seconds: float


def prepare(gen: GenConfig, comp: CompressorConfig = CompressorConfig(), workers: int = 1) -> Prepared:
    data = generate(gen)
    catalog = data.catalog.normalized()
    emb = clustering_embeddings(catalog, data.tables)
    start = time.perf_counter()
    compressed = compress_all(data.sequences, emb, catalog, comp, workers)
    elapsed = time.perf_counter() - start
    full = ImpressionData(catalog, data.impressions, data.sequences, cluster_units_for(compressed, catalog))
    tr, te = data.train_test()
    return Prepared(data, catalog, data.sequences, emb, compressed, full.subset(tr), full.subset(te), elapsed)


def history_cohorts(lengths: np.ndarray) -> np.ndarray:
    """Low / Medium / High terciles of history length, as indices into ``COHORTS``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.size == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = np.quantile(lengths, [1 / 3, 2 / 3])
    return np.where(lengths <= lo, 0, np.where(lengths <= hi, 1, 2)).astype(np.int64)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def mean_gsu_recall(model: CtrModel, prep: Prepared, k: int, n_samples: int = 200, seed: int = 0) -> float | None:
    """GSU recall of cluster retrieval against item-level retrieval, averaged over test impressions."""
    imp = prep.test.impressions
    if len(imp) == 0:
        return None
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(imp), size=min(n_samples, len(imp)), replace=False)
    vals = []
    for i in np.sort(pick):
        u, item = int(imp.user_ids[i]), int(imp.item_ids[i])
        hist = prep.compressed[u].history
        if hist.source_length == 0:
            continue
        seq = prep.sequences[u]
        q = model.inherent(prep.catalog.categorical[[item]], prep.catalog.numerical[[item]])
        raw = units_from_raw(seq, prep.catalog)
        cl = prep.train.cluster_units[u]
        item_scores = _unit_scores(model, q, raw, reweight=False)
        cluster_scores = _unit_scores(model, q, cl, reweight=True)
        vals.append(gsu_recall(hist, item_scores, cluster_scores, k))
    return float(np.mean(vals)) if vals else None


def _unit_scores(model: CtrModel, q, units, reweight: bool) -> np.ndarray:
    kh = model.inherent(units.cat, units.num)[None]
    kc = model.cross_embed(units.cross)[None]
    # unit sizes of one leave the scores unweighted (ln 1 = 0)
    sizes = units.sizes.astype(np.float64)[None] if reweight else np.ones((1, len(units)))
    return model.gsu_scores(q, kh, kc, sizes)[0]


def evaluate(name: str, model: CtrModel, prep: Prepared, recall_k: int | None = None) -> EvalReport:
    start = time.perf_counter()
    test = prep.test
    scores = test.predict(model)
    labels = test.impressions.labels
    users = test.impressions.user_ids
    predict_s = time.perf_counter() - start
    g = _safe(gauc, scores, labels, users)
    cohort_of_user = history_cohorts(test.sequence_length)
    cohorts = {}
    for ci, cname in enumerate(COHORTS):
        mask = cohort_of_user[users] == ci
        r = _safe(gauc, scores[mask], labels[mask], users[mask]) if mask.any() else None
        cohorts[cname] = r.value if r else None
    hist = [c.history for c in prep.compressed]
    acc = _safe(cluster_accuracy, [h for h in hist if len(h)], prep.embeddings)
    recall = None
    if model.cfg.history == "clusters":
        recall = mean_gsu_recall(model, prep, recall_k or model.cfg.topk)
    return EvalReport(
        name=name,
        auc=_safe(auc, scores, labels),
        gauc=g.value if g else None,
        gauc_skipped_users=g.skipped if g else 0,
        cohort_gauc=cohorts,
        cluster_accuracy=acc.value if acc else None,
        gsu_recall=recall,
        compression_ratio=compression_ratio(hist),
        n_test=len(test),
        runtimes={"predict_s": predict_s, "compress_s": prep.compress_seconds},
    )


# ---------------------------------------------------------------------------- clustering variants

@dataclass
class VariantStats:
    variant: str
    seed: int
    cluster_accuracy: float
    seconds_per_user: float
    compression_ratio: float
    mean_cluster_size: float


def compare_variants(
    gen: GenConfig,
    seeds=range(5),
    comp: CompressorConfig = CompressorConfig(),
    variants=(Variant.ADAPTIVE, Variant.BINARY, Variant.BALANCED_BINARY),
) -> list[VariantStats]:
    """Cluster accuracy and per-user clustering time of each variant over several seeds."""
    out = []
    for seed in seeds:
        data = generate(replace(gen, seed=seed))
        catalog = data.catalog.normalized()
        emb = clustering_embeddings(catalog, data.tables)
        for v in variants:
            cfg = replace(comp, variant=Variant(v), kmeans_seed=seed)
            start = time.perf_counter()
            res = compress_all(data.sequences, emb, catalog, cfg)
            elapsed = time.perf_counter() - start
            hist = [r.history for r in res]
            sizes = np.concatenate([h.sizes for h in hist])
            out.append(
                VariantStats(
                    Variant(v).value,
                    seed,
                    cluster_accuracy(hist, emb).value,
                    elapsed / max(1, len(hist)),
                    compression_ratio(hist),
                    float(sizes.mean()),
                )
            )
    return out


# ---------------------------------------------------------------------------- ablation grid

class MissingCheckpoint(KeyError):
    pass


@dataclass(frozen=True)
class AblationConfig:
    preset: str = "size_skew"
    seeds: tuple[int, ...] = (0,)
    variants: tuple[str, ...] = ("adaptive",)
    reweight_gsu: tuple[bool, ...] = (True, False)
    reweight_esu: tuple[bool, ...] = (True, False)
    cells: tuple[tuple[bool, bool], ...] | None = None  # explicit (gsu, esu) pairs instead of the full grid
    baselines: tuple[str, ...] = ()  # any of "avgpool", "recent"
    topk: int = 20
    train_missing: bool = True
    gen_overrides: dict = field(default_factory=dict)
    model: ModelConfig = DESK_MODEL
    train: TrainConfig = DESK_TRAIN


def cell_name(variant: str, gsu: bool, esu: bool) -> str:
    return f"{variant}/gsu={'on' if gsu else 'off'}/esu={'on' if esu else 'off'}"


def run_ablation(cfg: AblationConfig, checkpoints: dict | None = None) -> list[dict]:
    """Grid over {GSU reweight} x {ESU reweight} x {clustering variant} (+ baselines), per seed.

    ``checkpoints`` maps ``(seed, cell name)`` to a trained :class:`CtrModel`; missing cells
    are trained when ``train_missing`` is set, otherwise :class:`MissingCheckpoint` is raised.
    Returns one row per (seed, cell) with the report fields flattened.
    """
    checkpoints = dict(checkpoints or {})
    rows = []
    for seed in cfg.seeds:
        gen = preset(cfg.preset, seed=seed, **cfg.gen_overrides)
        for variant in cfg.variants:
            prep = prepare(gen, CompressorConfig(variant=Variant(variant), kmeans_seed=seed))
            cells = cfg.cells or [(g, e) for g in cfg.reweight_gsu for e in cfg.reweight_esu]
            for g, e in cells:
                name = cell_name(variant, g, e)
                mcfg = replace(cfg.model, topk=cfg.topk, reweight_gsu=g, reweight_esu=e, history="clusters")
                model = _checkpoint(checkpoints, seed, name, cfg, prep, mcfg)
                rows.append(_row(seed, name, evaluate(name, model, prep)))
            if variant == cfg.variants[0]:
                for base in cfg.baselines:
                    mcfg = replace(cfg.model, topk=cfg.topk, history=base)
                    model = _checkpoint(checkpoints, seed, base, cfg, prep, mcfg)
                    rows.append(_row(seed, base, evaluate(base, model, prep)))
    return rows


def _checkpoint(checkpoints, seed, name, cfg: AblationConfig, prep: Prepared, mcfg: ModelConfig) -> CtrModel:
    key = (seed, name)
    if key in checkpoints:
        return checkpoints[key]
    if not cfg.train_missing:
        raise MissingCheckpoint(f"no checkpoint for seed {seed}, cell {name!r}")
    model = CtrModel.init(prep.catalog.schema, prep.train.n_users, mcfg, seed=seed, tables=prep.data.tables)
    model = train(model, prep.train, replace(cfg.train, seed=seed)).model
    checkpoints[key] = model
    return model


def _row(seed: int, name: str, rep: EvalReport) -> dict:
    row = {"seed": seed, "cell": name}
    for k, v in rep.to_json().items():
        if k == "cohort_gauc":
            for c, x in v.items():
                row[f"gauc_{c}"] = x
        elif k != "name":
            row[k] = v
    return row


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def format_rows(rows: list[dict]) -> str:
    """Fixed-width text table of the headline columns."""
    cols = ["seed", "cell", "auc", "gauc", "gauc_low", "gauc_medium", "gauc_high", "gsu_recall"]
    lines = [" ".join(f"{c:>12}" if i != 1 else f"{c:<28}" for i, c in enumerate(cols))]
    for r in rows:
        cells = []
        for i, c in enumerate(cols):
            v = r.get(c)
            if i == 1:
                cells.append(f"{v:<28}")
            elif isinstance(v, float):
                cells.append(f"{v:>12.4f}")
            else:
                cells.append(f"{'n/a' if v is None else v:>12}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps({"schema": REPORT_SCHEMA, "rows": rows}, indent=1, sort_keys=True)


def bayes_auc(prep: Prepared) -> float:
    te = prep.test.impressions
    return auc(bayes_scores(prep.data, te), te.labels)
