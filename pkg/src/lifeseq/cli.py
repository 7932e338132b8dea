"""Command-line entry point: ``lifeseq <command> [options]``.

Exit codes: 0 success, 2 bad configuration or usage, 3 bad or missing data,
4 numeric failure. Primary outputs are deterministic given inputs and seed;
wall-clock times only go to stdout and the training log.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import config as config_mod
from . import experiments, storage
from .attention import SplitEmbeddings, esu_head, gsu_topk
from .compressor import CompressedHistory, Variant
from .core import BehaviorSequence, DataError, EmbeddingTables, SchemaError, make_rng
from .datagen import Impressions, generate
from .metrics import compression_ratio
from .model import CtrModel, ModelConfig, NumericError, train
from .pipeline import CompressedUser, ImpressionData, clustering_embeddings, cluster_units_for, compress_all

log = logging.getLogger("lifeseq")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

CATALOG_FILE = "catalog.jsonl"
LOGS_FILE = "logs.jsonl"
IMPRESSIONS_FILE = "impressions.jsonl"
TABLES_FILE = "tables.bin"
CONFIG_FILE = "run_config.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _workers(cfg: config_mod.RunConfig) -> int:
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


class Dataset:
    """A data directory written by ``gen-data`` (or assembled by hand)."""

    def __init__(self, root: Path):
        self.root = root
        for name in (CATALOG_FILE, LOGS_FILE, IMPRESSIONS_FILE):
            if not (root / name).exists():
                raise CliError(EXIT_DATA, f"missing {root / name}")
        self.raw_catalog = storage.load_catalog(root / CATALOG_FILE)
        self.catalog = self.raw_catalog.normalized()
        self.sequences = storage.load_logs(root / LOGS_FILE)
        self.impressions, self.cutoff = storage.load_impressions(root / IMPRESSIONS_FILE)
        tpath = root / TABLES_FILE
        self.tables = storage.load_tables(tpath) if tpath.exists() else None
        self.n_users = max(
            [s.user_id + 1 for s in self.sequences] + [int(self.impressions.user_ids.max()) + 1 if len(self.impressions) else 0]
        )
        by_user = {s.user_id: s for s in self.sequences}
        # one entry per user id; users absent from the log are cold
        self.by_user = [by_user.get(u, BehaviorSequence(u)) for u in range(self.n_users)]
        ids = [s.item_ids for s in self.sequences] + [self.impressions.item_ids]
        for arr in ids:
            self.catalog.check_ids(arr)

    def clustering_tables(self, seed: int) -> EmbeddingTables:
        if self.tables is not None:
            return self.tables
        return EmbeddingTables.init(self.catalog.schema, make_rng(seed, 0xCA7))

    def split(self) -> tuple[Impressions, Impressions]:
        if self.cutoff is None:
            raise CliError(EXIT_DATA, "impressions file has no train/test cutoff")
        test = self.impressions.timestamps >= self.cutoff
        return self.impressions.subset(~test), self.impressions.subset(test)


def _load_clusters(path: Path, data: Dataset) -> list[CompressedUser]:
    if not path.exists():
        raise CliError(EXIT_DATA, f"missing cluster store {path}")
    _, entries = storage.load_clusters(path)
    by_user = {h.user_id: (h, v) for h, v in entries}
    out = []
    for s in data.by_user:
        if s.user_id not in by_user:
            if len(s) == 0:
                out.append(CompressedUser(CompressedHistory(s.user_id, 0, []), [], 0.0))
                continue
            raise CliError(EXIT_DATA, f"cluster store has no entry for user {s.user_id}")
        h, v = by_user[s.user_id]
        if h.source_length != len(s):
            raise CliError(EXIT_DATA, f"user {s.user_id}: store covers {h.source_length} behaviors, log has {len(s)}")
        if v is None:
            raise CliError(EXIT_DATA, f"user {s.user_id}: cluster store lacks virtual items")
        out.append(CompressedUser(h, v, 0.0))
    return out


def _impression_data(data: Dataset, compressed) -> ImpressionData:
    units = cluster_units_for(compressed, data.catalog) if compressed is not None else None
    return ImpressionData(data.catalog, data.impressions, data.sequences, units, data.n_users)


def _save_model(path: Path, model: CtrModel, cfg: config_mod.RunConfig) -> None:
    meta = {
        "schema": storage.schema_to_json(model.schema),
        "n_users": model.n_users,
        "model": config_mod._plain(asdict(model.cfg)),
        "config": cfg.to_json(),
    }
    storage.store_params(path, model.params, meta)


def _load_model(path: Path) -> CtrModel:
    if not path.exists():
        raise CliError(EXIT_DATA, f"missing model file {path}")
    arrays, meta = storage.load_params(path)
    try:
        schema = storage.schema_from_json(meta["schema"])
        cfg = ModelConfig(**meta["model"])
        model = CtrModel(schema, int(meta["n_users"]), cfg, arrays)
    except (KeyError, TypeError) as exc:
        raise CliError(EXIT_DATA, f"{path}: incomplete model metadata ({exc})") from None
    return model


def _needs_clusters(model_cfg: ModelConfig) -> bool:
    return model_cfg.history == "clusters"


# ---------------------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: config_mod.RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    data = generate(cfg.gen)
    storage.store_catalog(out / CATALOG_FILE, data.catalog)
    storage.store_logs(out / LOGS_FILE, data.sequences)
    storage.store_impressions(out / IMPRESSIONS_FILE, data.impressions, data.cutoff)
    storage.store_tables(out / TABLES_FILE, data.tables)
    _write_json(out / CONFIG_FILE, cfg.to_json())
    print(
        f"users {len(data.sequences)}  behaviors {sum(len(s) for s in data.sequences)}  "
        f"impressions {len(data.impressions)}  wall {time.perf_counter() - start:.2f}s"
    )


def cmd_compress(args, cfg: config_mod.RunConfig) -> None:
    data = Dataset(Path(args.data))
    emb = clustering_embeddings(data.catalog, data.clustering_tables(cfg.seed))
    start = time.perf_counter()
    res = compress_all(data.sequences, emb, data.catalog, cfg.compressor, _workers(cfg))
    wall = time.perf_counter() - start
    out = Path(args.out)
    effective = cfg.to_json()
    storage.store_clusters(out, [(r.history, r.virtual_items) for r in res], effective)
    hist = [r.history for r in res]
    sizes = np.concatenate([h.sizes for h in hist]) if hist else np.zeros(0)
    ratio = compression_ratio(hist)
    summary = {
        "T": int(sum(h.source_length for h in hist)),
        "T_hat": int(sum(len(h) for h in hist)),
        "ratio": ratio,
        "mean_cluster_size": float(sizes.mean()) if sizes.size else None,
        "depth_cap_hits": int(sum(h.depth_cap_hits for h in hist)),
        "config": effective,
    }
    _write_json(Path(str(out) + ".summary.json"), summary)
    ratio_s = f"{ratio:.4f}" if ratio is not None else "n/a"
    mean_s = f"{summary['mean_cluster_size']:.2f}" if sizes.size else "n/a"
    print(f"T {summary['T']}  T_hat {summary['T_hat']}  ratio {ratio_s}  mean cluster size {mean_s}  wall {wall:.2f}s")


def cmd_train(args, cfg: config_mod.RunConfig) -> None:
    data = Dataset(Path(args.data))
    compressed = _load_clusters(Path(args.clusters), data) if _needs_clusters(cfg.model) else None
    full = _impression_data(data, compressed)
    tr, _ = data.split()
    model = CtrModel.init(data.catalog.schema, data.n_users, cfg.model, seed=cfg.seed, tables=data.tables)
    digest = cfg.digest()
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "wall_s", "seed", "config_hash"])

        def on_epoch(epoch, loss, seconds):
            writer.writerow([epoch, repr(float(loss)), f"{seconds:.3f}", cfg.seed, digest])
            fh.flush()
            print(f"epoch {epoch}  loss {loss:.6f}  wall {seconds:.2f}s")

        result = train(model, full.subset(tr), cfg.train, on_epoch)
    _save_model(Path(args.out), result.model, cfg)


def cmd_eval(args, cfg: config_mod.RunConfig) -> None:
    data = Dataset(Path(args.data))
    model = _load_model(Path(args.model))
    compressed = _load_clusters(Path(args.clusters), data) if args.clusters else None
    if compressed is None and _needs_clusters(model.cfg):
        raise CliError(EXIT_CONFIG, "model uses clustered history; pass --clusters")
    full = _impression_data(data, compressed)
    tr, te = data.split()
    emb = clustering_embeddings(data.catalog, data.clustering_tables(cfg.seed))
    prep = experiments.Prepared(
        data=None,
        catalog=data.catalog,
        sequences=data.by_user,
        embeddings=emb,
        compressed=compressed or [],
        train=full.subset(tr),
        test=full.subset(te),
        compress_seconds=0.0,
    )
    report = experiments.evaluate(args.name, model, prep)
    out = report.to_json()
    out["config"] = cfg.to_json()
    if args.out:
        _write_json(Path(args.out), out)
    print(json.dumps(report.to_json(with_runtimes=True), indent=1, sort_keys=True))


def cmd_score(args, cfg: config_mod.RunConfig) -> None:
    data = Dataset(Path(args.data))
    model = _load_model(Path(args.model))
    if not 0 <= args.user < data.n_users or args.user >= model.n_users:
        raise CliError(EXIT_DATA, f"unknown user {args.user}")
    if not 0 <= args.item < len(data.catalog):
        raise CliError(EXIT_DATA, f"unknown item {args.item}")
    compressed = None
    if _needs_clusters(model.cfg):
        if not args.clusters:
            raise CliError(EXIT_CONFIG, "model uses clustered history; pass --clusters")
        compressed = _load_clusters(Path(args.clusters), data)
    full = _impression_data(data, compressed)
    imp = Impressions(
        np.array([args.user]), np.array([args.item]), np.array([0], dtype=np.int64), np.array([0], dtype=np.int64)
    )
    one = full.subset(imp)
    prob = float(one.predict(model)[0])
    print(f"user {args.user}  item {args.item}  probability {prob:.6f}")
    dump = score_dump(model, one, args.top)
    if dump is None:
        print("no long-term history: interest vector is zero")
        return
    print(f"retrieved {len(dump['retrieved'])} of {dump['n_units']} units")
    heads = len(dump["retrieved"][0]["esu_weight"]) if dump["retrieved"] else 0
    print("rank  unit  size  gsu_score  " + "  ".join(f"w_h{a}" for a in range(heads)))
    for r, row in enumerate(dump["retrieved"][: args.top]):
        ws = "  ".join(f"{w:.4f}" for w in row["esu_weight"])
        print(f"{r:4d}  {row['unit']:4d}  {row['size']:4d}  {row['gsu_score']:9.4f}  {ws}")
    print("head weight sums: " + " ".join(f"{s:.12f}" for s in dump["weight_sums"]))


def score_dump(model: CtrModel, one: ImpressionData, top: int) -> dict | None:
    """GSU scores and per-head ESU weights for a single-impression dataset."""
    batch = one.batch(np.array([0]), model.cfg)
    if model.cfg.history == "avgpool" or not batch.unit_mask.any():
        return None
    q = model.inherent(batch.target_cat, batch.target_num)
    n = int(batch.unit_mask[0].sum())
    kh = model.inherent(batch.unit_cat, batch.unit_num)[:, :n]
    kc = model.cross_embed(batch.unit_cross)[:, :n]
    sizes = batch.unit_sizes[:, :n].astype(np.float64)
    scores = model.gsu_scores(q, kh, kc, sizes)[0]
    idx = gsu_topk(scores, model.cfg.topk)
    split = SplitEmbeddings(kh[0][idx], kc[0][idx])
    weights = np.array(
        [esu_head(q[0], split, head, sizes[0][idx], model.cfg.reweight_esu)[1] for head in model.attention_params().heads]
    )
    rows = [
        {"unit": int(i), "size": int(sizes[0][i]), "gsu_score": float(scores[i]), "esu_weight": weights[:, r].tolist()}
        for r, i in enumerate(idx)
    ]
    return {"n_units": n, "retrieved": rows, "weight_sums": weights.sum(axis=1).tolist()}


def cmd_ablate(args, cfg: config_mod.RunConfig) -> None:
    seeds = tuple(int(s) for s in args.seeds.split(","))
    variants = tuple(Variant(v).value for v in args.variants.split(","))
    acfg = experiments.AblationConfig(
        preset=args.preset,
        seeds=seeds,
        variants=variants,
        baselines=tuple(b for b in args.baselines.split(",") if b),
        topk=args.topk,
        gen_overrides={"n_users": args.users} if args.users else {},
        model=experiments.DESK_MODEL,
        train=replace(experiments.DESK_TRAIN, epochs=args.epochs) if args.epochs else experiments.DESK_TRAIN,
    )
    start = time.perf_counter()
    rows = experiments.run_ablation(acfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = {"ablation": config_mod._plain(asdict(acfg)), "config": cfg.to_json()}
    (out / "ablation.csv").write_text(experiments.rows_to_csv(rows))
    _write_json(out / "ablation.json", {**json.loads(experiments.rows_to_json(rows)), **effective})
    table = experiments.format_rows(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    print(f"wall {time.perf_counter() - start:.1f}s")


def cmd_bench(args, cfg: config_mod.RunConfig) -> None:
    data = Dataset(Path(args.data))
    tables = EmbeddingTables.init(data.catalog.schema, make_rng(cfg.seed, 0xBE))
    if data.tables is not None:
        for name in data.tables.tables:
            tables[name] = data.tables[name]
    emb = clustering_embeddings(data.catalog, data.clustering_tables(cfg.seed))
    b = cfg.bench
    timings = bench_mod.run(
        data.sequences,
        data.catalog,
        tables,
        emb,
        cfg.compressor,
        users=b.users,
        targets=b.targets,
        topk=cfg.model.topk,
        repeats=b.repeats,
        warmup=b.warmup,
        seed=cfg.seed,
    )
    table = bench_mod.format_table(timings)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")


# ---------------------------------------------------------------------------- parser

def _global_options(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="JSON run config (blocks: gen, compressor, model, train, bench)")
    p.add_argument(
        "--set", action="append", dest="set", default=default, metavar="KEY=VALUE", help="override, e.g. model.topk=50"
    )
    p.add_argument("--seed", type=int, default=default, help="global seed; stages without their own seed inherit it")
    p.add_argument("--workers", type=int, default=default, help="worker processes for per-user stages (0 = all CPUs)")
    p.add_argument("--log-level", default=default, choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifeseq", description=__doc__.splitlines()[0])
    _global_options(p, None)
    # the same options are accepted after the subcommand; SUPPRESS keeps unset ones from clobbering
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("compress", parents=[common], help="compress every user's history into a cluster store")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="cluster store path; a .summary.json is written beside it")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("train", parents=[common], help="train the CTR model on the train split")
    s.add_argument("--data", required=True)
    s.add_argument("--clusters", help="cluster store (required for clustered history)")
    s.add_argument("--out", required=True, help="model parameter file")
    s.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a model on the test split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--clusters")
    s.add_argument("--name", default="model")
    s.add_argument("--out", help="report JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", parents=[common], help="score one (user, item) pair and dump retrieval")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--clusters")
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--item", type=int, required=True)
    s.add_argument("--top", type=int, default=10, help="rows of the retrieval dump to print")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("ablate", parents=[common], help="reweighting ablation grid on a synthetic preset")
    s.add_argument("--preset", default="size_skew", choices=sorted(experiments.PRESETS))
    s.add_argument("--seeds", default="0")
    s.add_argument("--variants", default="adaptive")
    s.add_argument("--baselines", default="")
    s.add_argument("--topk", type=int, default=20)
    s.add_argument("--users", type=int, help="override the preset's user count")
    s.add_argument("--epochs", type=int, help="override the training epochs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", parents=[common], help="latency of compression, GSU, ESU and cached projection")
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="write the table here as well")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        if args.log_level is not None:
            overrides.append(f"log_level={args.log_level}")
        cfg = config_mod.load(args.config, overrides)
        logging.basicConfig(level=cfg.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except experiments.MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (storage.ParseError, SchemaError, DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
