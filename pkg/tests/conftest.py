import numpy as np
import pytest

from lifeseq.core import Catalog, EmbeddingTables, FieldSpec, Schema, make_rng
from lifeseq.datagen import GenConfig, generate


def small_schema(n_items=40, id_dim=4, n_authors=6, cross_dim=3) -> Schema:
    return Schema(
        (
            FieldSpec("item_id", "categorical", n_items, id_dim),
            FieldSpec("author_id", "categorical", n_authors, id_dim),
            FieldSpec("duration", "numerical"),
            FieldSpec("completion", "cross", 10, cross_dim),
            FieldSpec("age", "cross", 16, cross_dim),
        )
    )


def small_catalog(n_items=40, seed=0, **kw) -> Catalog:
    schema = small_schema(n_items, **kw)
    rng = np.random.default_rng(seed)
    n_authors = schema.field("author_id").vocab_size
    cat = np.stack([np.arange(n_items), rng.integers(0, n_authors, n_items)], axis=1)
    num = rng.uniform(0.0, 1.0, (n_items, 1))
    return Catalog(schema, cat, num)


@pytest.fixture
def catalog():
    return small_catalog()


@pytest.fixture
def tables(catalog):
    return EmbeddingTables.init(catalog.schema, make_rng(0))


@pytest.fixture(scope="session")
def tiny_data():
    cfg = GenConfig(
        n_users=12,
        n_items=400,
        n_authors=40,
        id_dim=8,
        cohort_medians=(60.0, 150.0, 400.0),
        impressions_per_user=16,
        seed=3,
    )
    return generate(cfg)


def tiny_batch(catalog, n_users=3, lengths=(4, 2, 0), seed=0):
    """Hand-built batch over ``catalog``: one sample per entry of ``lengths``
    (units per sample, padded to the longest), random sizes and labels."""
    from scipy import sparse as sp

    from lifeseq.model import Batch, HistoryUnits, pad_units

    rng = np.random.default_rng(seed)
    schema = catalog.schema
    n = len(catalog)
    units = []
    for length in lengths:
        ids = rng.integers(0, n, length)
        cross = np.stack([rng.integers(0, f.vocab_size, length) for f in schema.cross], axis=1)
        units.append(HistoryUnits(catalog.categorical[ids], catalog.numerical[ids], cross, rng.integers(1, 30, length)))
    cat, num, cross, sizes, mask = pad_units(units, schema)
    b = len(lengths)
    targets = rng.integers(0, n, b)
    pool = sp.csr_matrix(rng.uniform(size=(b, n)) * (rng.uniform(size=(b, n)) < 0.2))
    return Batch(
        users=rng.integers(0, n_users, b),
        target_cat=catalog.categorical[targets],
        target_num=catalog.numerical[targets],
        unit_cat=cat,
        unit_num=num,
        unit_cross=cross,
        unit_sizes=sizes,
        unit_mask=mask,
        recent_pool=pool,
        labels=(np.arange(b) % 2).astype(np.float64),
    )


def gradient_check(seed=0, eps=1e-4, history="clusters"):
    """Central finite differences against ``CtrModel.backward`` on a tiny model
    (2 heads, 4 clusters). Returns ``{parameter: relative error}`` where the error
    is ``|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)``."""
    from lifeseq.model import CtrModel, ModelConfig, bce_loss, densify

    catalog = small_catalog(12, seed, id_dim=2, n_authors=3, cross_dim=2)
    cfg = ModelConfig(d_k=3, d_v=2, d_out=3, n_heads=2, hidden=(4, 3), user_dim=2, topk=4, history=history)
    model = CtrModel.init(catalog.schema, 3, cfg, seed=seed)
    # zero-initialized biases put empty inputs exactly on a ReLU kink
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.startswith("head/b"):
            p[:] = rng.normal(0.0, 0.1, p.shape)
    batch = tiny_batch(catalog, lengths=(4, 3, 0), seed=seed)
    if history == "avgpool":
        batch.full_pool = batch.recent_pool[::-1]

    def loss():
        return bce_loss(model.forward(batch, catalog)[0], batch.labels)

    _, cache = model.forward(batch, catalog)
    grads = model.backward(cache, batch.labels)
    errors = {}
    for name, p in model.params.items():
        analytic = densify(grads.get(name, np.zeros_like(p)), p.shape)
        numeric = np.zeros_like(p)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)
    return errors


TINY_RUN = {
    "gen": {"n_users": 10, "n_items": 300, "n_authors": 30, "id_dim": 8, "cohort_medians": [40, 90, 200], "impressions_per_user": 16},
    "model": {"d_k": 8, "d_v": 8, "d_out": 8, "topk": 10},
    "train": {"epochs": 2, "lr": 0.005, "batch_size": 64},
    "bench": {"repeats": 2, "warmup": 0, "users": 3, "targets": 4},
}


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    import contextlib
    import io

    from lifeseq.cli import main

    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def run_pipeline(root, seed=0):
    """gen-data, compress, train, eval and score into ``root``; returns the
    primary output files (wall-clock logs excluded) and the score stdout."""
    import json

    root.mkdir(parents=True, exist_ok=True)
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    data, store, model = root / "data", root / "clusters.jsonl", root / "model.bin"
    common = ("--config", config, "--seed", seed, "--workers", 1)
    steps = [
        ("gen-data", "--out", data),
        ("compress", "--data", data, "--out", store),
        ("train", "--data", data, "--clusters", store, "--out", model),
        ("eval", "--data", data, "--model", model, "--clusters", store, "--out", root / "report.json"),
        ("score", "--data", data, "--model", model, "--clusters", store, "--user", 1, "--item", 5),
    ]
    score_out = None
    for step in steps:
        code, out, err = run_cli(*step, *common)
        assert code == 0, (step[0], err)
        score_out = out
    files = [*sorted(data.iterdir()), store, root / "clusters.jsonl.summary.json", model, root / "report.json"]
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}, score_out
