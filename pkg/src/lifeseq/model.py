"""End-to-end CTR scorer and trainer with hand-written gradients.

The logit comes from a two-hidden-layer ReLU head over
``[user embedding, target inherent vector, long-term interest, recent-100 mean]``.
The long-term interest is produced by retrieval + multi-head attention over
compressed clusters (or, for baselines, over raw recent behaviors or a plain
mean of the whole history). Clustering itself is fixed and not differentiated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .attention import AttentionParams, HeadParams, softmax
from .cluster_repr import VirtualItem
from .core import CROSS, FieldSpec, Schema, make_rng

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0
PROB_CLAMP = 1e-12
RECENT = 100

HISTORY_MODES = ("clusters", "recent", "avgpool")


class NumericError(FloatingPointError):
    """Non-finite gradient or diverging loss."""


# ----------------------------------------------------------------------------
# cross-feature bucketing

def completion_bucket(p, vocab: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.minimum(np.floor(p * vocab), vocab - 1).astype(np.int64)


def age_bucket(age_seconds, vocab: int, unit: float = 3600.0) -> np.ndarray:
    """Log2 buckets of age in hours: 0 for < 1h, 1 for [1h, 3h), ... capped at ``vocab - 1``."""
    age = np.maximum(np.asarray(age_seconds, dtype=np.float64), 0.0)
    return np.minimum(np.floor(np.log2(1.0 + age / unit)), vocab - 1).astype(np.int64)


def cross_indices(schema: Schema, completion, age) -> np.ndarray:
    """(L, J) bucket indices for the schema's cross fields, which must be
    ``completion`` then ``age`` in declaration order (only the first J are used)."""
    cols = []
    makers = (completion_bucket, age_bucket)
    sources = (completion, age)
    for spec, make, src in zip(schema.cross, makers, sources):
        cols.append(make(src, spec.vocab_size))
    n = np.asarray(completion).shape[0]
    return np.stack(cols, axis=-1) if cols else np.zeros((n, 0), dtype=np.int64)


# ----------------------------------------------------------------------------
# history units

@dataclass
class HistoryUnits:
    """Attention inputs for one user: one row per cluster (or raw behavior)."""

    cat: np.ndarray  # (L, N1) int
    num: np.ndarray  # (L, N2)
    cross: np.ndarray  # (L, J) int
    sizes: np.ndarray  # (L,) int >= 1

    def __len__(self) -> int:
        return int(self.sizes.shape[0])

    @classmethod
    def empty(cls, schema: Schema) -> "HistoryUnits":
        return cls(
            np.zeros((0, len(schema.categorical)), dtype=np.int64),
            np.zeros((0, len(schema.numerical))),
            np.zeros((0, len(schema.cross)), dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def take(self, idx) -> "HistoryUnits":
        idx = np.asarray(idx, dtype=np.int64)
        return HistoryUnits(self.cat[idx], self.num[idx], self.cross[idx], self.sizes[idx])


def units_from_virtual_items(vitems: list[VirtualItem], schema: Schema) -> HistoryUnits:
    if not vitems:
        return HistoryUnits.empty(schema)
    cross = np.stack([v.cross for v in vitems])
    return HistoryUnits(
        np.stack([v.categorical for v in vitems]).astype(np.int64),
        np.stack([v.numerical for v in vitems]),
        cross_indices(schema, cross[:, 0], cross[:, 1]),
        np.array([v.size for v in vitems], dtype=np.int64),
    )


def units_from_raw(seq, catalog, last: int | None = None) -> HistoryUnits:
    """Raw behaviors as singleton units (most recent ``last`` if given)."""
    schema = catalog.schema
    if len(seq) == 0:
        return HistoryUnits.empty(schema)
    sl = slice(-last, None) if last else slice(None)
    ids = seq.item_ids[sl]
    age = seq.timestamps[-1] - seq.timestamps[sl]
    return HistoryUnits(
        catalog.categorical[ids],
        catalog.numerical[ids],
        cross_indices(schema, seq.completion_ratios[sl], age),
        np.ones(ids.shape[0], dtype=np.int64),
    )


def pooling_row(seq, n_items: int, last: int | None = None) -> sp.csr_matrix:
    """1 x n_items sparse row of mean-pooling weights over (the last ``last``) behaviors."""
    ids = seq.item_ids[-last:] if last else seq.item_ids
    if ids.size == 0:
        return sp.csr_matrix((1, n_items))
    w = np.full(ids.shape[0], 1.0 / ids.shape[0])
    return sp.csr_matrix((w, (np.zeros_like(ids), ids)), shape=(1, n_items))


# ----------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class ModelConfig:
    d_k: int = 32
    d_v: int = 32
    d_out: int = 32
    n_heads: int = 4
    hidden: tuple[int, int] = (64, 32)
    user_dim: int = 8
    topk: int = 100
    history: str = "clusters"
    reweight_gsu: bool = True
    reweight_esu: bool = True

    def __post_init__(self):
        if self.history not in HISTORY_MODES:
            raise ValueError(f"history must be one of {HISTORY_MODES}")
        object.__setattr__(self, "hidden", tuple(self.hidden))


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    divergence_factor: float = 10.0
    divergence_patience: int = 3

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    users: np.ndarray  # (B,)
    target_cat: np.ndarray  # (B, N1)
    target_num: np.ndarray  # (B, N2)
    unit_cat: np.ndarray  # (B, L, N1)
    unit_num: np.ndarray  # (B, L, N2)
    unit_cross: np.ndarray  # (B, L, J)
    unit_sizes: np.ndarray  # (B, L); 1 on padding
    unit_mask: np.ndarray  # (B, L) bool
    recent_pool: sp.csr_matrix  # (B, n_items)
    full_pool: sp.csr_matrix | None = None  # (B, n_items), avgpool mode only
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.users.shape[0])


def pad_units(units: list[HistoryUnits], schema: Schema):
    b = len(units)
    length = max((len(u) for u in units), default=0)
    n1, n2, j = len(schema.categorical), len(schema.numerical), len(schema.cross)
    cat = np.zeros((b, length, n1), dtype=np.int64)
    num = np.zeros((b, length, n2))
    cross = np.zeros((b, length, j), dtype=np.int64)
    sizes = np.ones((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    for i, u in enumerate(units):
        n = len(u)
        cat[i, :n], num[i, :n], cross[i, :n], sizes[i, :n] = u.cat, u.num, u.cross, u.sizes
        mask[i, :n] = True
    return cat, num, cross, sizes, mask


# ----------------------------------------------------------------------------
# model

class CtrModel:
    """Parameters live in a flat ``name -> array`` dict; embedding tables are
    ``emb/<field>``, attention weights ``att/h<a>/<name>`` and ``att/wo``, head
    weights ``head/w<i>`` / ``head/b<i>``."""

    def __init__(self, schema: Schema, n_users: int, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.schema = schema
        self.n_users = n_users
        self.cfg = cfg
        self.params = params
        self.version = 0
        self._check_shapes()

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, schema: Schema, n_users: int, cfg: ModelConfig = ModelConfig(), seed: int = 0, tables=None):
        rng = make_rng(seed, 0x5EED)
        params = {}
        for spec in (*schema.categorical, *schema.cross, FieldSpec("user_id", CROSS, n_users, cfg.user_dim)):
            bound = 1.0 / math.sqrt(spec.dim)
            params[f"emb/{spec.name}"] = rng.uniform(-bound, bound, size=(spec.vocab_size, spec.dim))
        if tables is not None:
            for name, table in tables.tables.items():
                if f"emb/{name}" in params:
                    params[f"emb/{name}"] = np.array(table, dtype=np.float64)
        c = _cross_width(schema)
        att = AttentionParams.init(
            schema.inherent_dim, len(schema.cross), c, rng, cfg.d_k, cfg.d_v, cfg.d_out, cfg.n_heads
        )
        for a, h in enumerate(att.heads):
            for name, arr in h.arrays().items():
                params[f"att/h{a}/{name}"] = arr
        params["att/wo"] = att.wo
        widths = [cls.head_input_dim(schema, cfg), *cfg.hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[f"head/w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"head/b{i}"] = np.zeros(fan_out)
        return cls(schema, n_users, cfg, params)

    @staticmethod
    def head_input_dim(schema: Schema, cfg: ModelConfig) -> int:
        h = schema.inherent_dim
        interest = h if cfg.history == "avgpool" else cfg.d_out
        return cfg.user_dim + h + interest + h

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        s, cfg = self.schema, self.cfg
        h, j, c = s.inherent_dim, len(s.cross), _cross_width(s)
        shapes = {f"emb/{f.name}": (f.vocab_size, f.dim) for f in (*s.categorical, *s.cross)}
        shapes["emb/user_id"] = (self.n_users, cfg.user_dim)
        for a in range(cfg.n_heads):
            shapes[f"att/h{a}/wq"] = (h, cfg.d_k)
            shapes[f"att/h{a}/wh"] = (h, cfg.d_k)
            shapes[f"att/h{a}/wc"] = (j, c)
            shapes[f"att/h{a}/beta"] = (j,)
            shapes[f"att/h{a}/wv"] = (h + j * c, cfg.d_v)
        shapes["att/wo"] = (cfg.n_heads * cfg.d_v, cfg.d_out)
        widths = [self.head_input_dim(s, cfg), *cfg.hidden, 1]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1):
            shapes[f"head/w{i}"] = (fan_in, fan_out)
            shapes[f"head/b{i}"] = (fan_out,)
        return shapes

    def _check_shapes(self) -> None:
        expected = self.expected_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {self.params[name].shape} != expected {shape}")

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def attention_params(self) -> AttentionParams:
        heads = [
            HeadParams(*(self.params[f"att/h{a}/{n}"] for n in ("wq", "wh", "wc", "beta", "wv")))
            for a in range(self.cfg.n_heads)
        ]
        return AttentionParams(heads, self.params["att/wo"], self.version)

    def copy(self) -> "CtrModel":
        m = CtrModel(self.schema, self.n_users, self.cfg, {k: v.copy() for k, v in self.params.items()})
        m.version = self.version
        return m

    # -- feature assembly -----------------------------------------------------

    def inherent(self, cat: np.ndarray, num: np.ndarray) -> np.ndarray:
        parts = [self.params[f"emb/{f.name}"][cat[..., j]] for j, f in enumerate(self.schema.categorical)]
        parts.append(num)
        return np.concatenate(parts, axis=-1)

    def cross_embed(self, cross: np.ndarray) -> np.ndarray:
        parts = [self.params[f"emb/{f.name}"][cross[..., j]] for j, f in enumerate(self.schema.cross)]
        if not parts:
            return np.zeros((*cross.shape[:-1], 0))
        return np.concatenate(parts, axis=-1)

    def pooled_inherent(self, pool: sp.csr_matrix, catalog_num: np.ndarray, catalog_cat: np.ndarray) -> np.ndarray:
        parts = [pool @ self.params[f"emb/{f.name}"][catalog_cat[:, j]] for j, f in enumerate(self.schema.categorical)]
        parts.append(pool @ catalog_num)
        return np.concatenate(parts, axis=-1)

    # -- retrieval ------------------------------------------------------------

    def gsu_scores(self, q: np.ndarray, kh: np.ndarray, kc: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        """Head-averaged relevance for a batch, (B, L). Uses the identity
        mean_a (K_h W_a^h)(W_a^q^T q)/sqrt(d_k) = K_h (mean_a W_a^h W_a^q^T q)/sqrt(d_k)."""
        cfg, p = self.cfg, self.params
        u = np.zeros_like(q)
        j = len(self.schema.cross)
        c = _cross_width(self.schema)
        wcb = np.zeros((j, c))
        for a in range(cfg.n_heads):
            u += (q @ p[f"att/h{a}/wq"]) @ p[f"att/h{a}/wh"].T
            wcb += p[f"att/h{a}/beta"][:, None] * p[f"att/h{a}/wc"]
        u /= cfg.n_heads * math.sqrt(cfg.d_k)
        wcb /= cfg.n_heads
        alpha = np.einsum("blh,bh->bl", kh, u)
        if j:
            alpha = alpha + np.einsum("bljc,jc->bl", kc.reshape(*kc.shape[:-1], j, c), wcb)
        if cfg.reweight_gsu:
            alpha = alpha + np.log(sizes)
        return alpha

    def retrieve(self, batch: Batch, q: np.ndarray) -> Batch:
        """Keep the top-k units per sample (all of them when fewer than k)."""
        k = self.cfg.topk
        length = batch.unit_mask.shape[1]
        if length <= k:
            return batch
        kh = self.inherent(batch.unit_cat, batch.unit_num)
        kc = self.cross_embed(batch.unit_cross)
        scores = self.gsu_scores(q, kh, kc, batch.unit_sizes.astype(np.float64))
        scores = np.where(batch.unit_mask, scores, -np.inf)
        idx = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        take = lambda a: np.take_along_axis(a, idx.reshape(*idx.shape, *([1] * (a.ndim - 2))), axis=1)
        return Batch(
            batch.users,
            batch.target_cat,
            batch.target_num,
            take(batch.unit_cat),
            take(batch.unit_num),
            take(batch.unit_cross),
            take(batch.unit_sizes),
            take(batch.unit_mask),
            batch.recent_pool,
            batch.full_pool,
            batch.labels,
        )

    # -- forward / backward ---------------------------------------------------

    def forward(self, batch: Batch, catalog) -> tuple[np.ndarray, dict]:
        """Probabilities for every sample plus the cache needed by :meth:`backward`."""
        cfg, p = self.cfg, self.params
        q = self.inherent(batch.target_cat, batch.target_num)
        cache = {"batch": batch, "q": q, "catalog": catalog}
        heads_out = []
        if cfg.history == "avgpool":
            interest = self.pooled_inherent(batch.full_pool, catalog.numerical, catalog.categorical)
        else:
            sel = self.retrieve(batch, q)
            cache["sel"] = sel
            kh = self.inherent(sel.unit_cat, sel.unit_num)
            kc = self.cross_embed(sel.unit_cross)
            kfull = np.concatenate([kh, kc], axis=-1)
            logn = np.log(sel.unit_sizes.astype(np.float64)) if cfg.reweight_esu else 0.0
            j, c = len(self.schema.cross), _cross_width(self.schema)
            kc4 = kc.reshape(*kc.shape[:-1], j, c)
            cache.update(kh=kh, kc4=kc4, kfull=kfull, heads=[])
            for a in range(cfg.n_heads):
                wq, wh = p[f"att/h{a}/wq"], p[f"att/h{a}/wh"]
                wc, beta, wv = p[f"att/h{a}/wc"], p[f"att/h{a}/beta"], p[f"att/h{a}/wv"]
                qp = q @ wq
                khw = kh @ wh
                alpha = np.einsum("bld,bd->bl", khw, qp) / math.sqrt(cfg.d_k)
                proj = np.einsum("bljc,jc->blj", kc4, wc)
                alpha = alpha + proj @ beta
                w = softmax(alpha + logn, mask=sel.unit_mask)
                v = kfull @ wv
                heads_out.append(np.einsum("bl,blv->bv", w, v))
                cache["heads"].append(dict(qp=qp, khw=khw, proj=proj, w=w, v=v))
            hcat = np.concatenate(heads_out, axis=-1)
            cache["hcat"] = hcat
            interest = hcat @ p["att/wo"]
        recent = self.pooled_inherent(batch.recent_pool, catalog.numerical, catalog.categorical)
        user = p["emb/user_id"][batch.users]
        x = np.concatenate([user, q, interest, recent], axis=-1)
        acts = [x]
        n_layers = len(cfg.hidden) + 1
        for i in range(1, n_layers + 1):
            z = acts[-1] @ p[f"head/w{i}"] + p[f"head/b{i}"]
            acts.append(np.maximum(z, 0.0) if i < n_layers else z[:, 0])
        logit = acts[-1]
        clamped = np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
        prob = 1.0 / (1.0 + np.exp(-clamped))
        cache.update(acts=acts, logit=logit, prob=prob)
        return prob, cache

    def backward(self, cache: dict, labels: np.ndarray) -> dict:
        """Gradients of the mean BCE loss. Dense arrays for dense parameters;
        embedding tables get ``(rows, values)`` pairs with unique rows."""
        cfg, p = self.cfg, self.params
        labels = np.asarray(labels, dtype=np.float64)
        prob, logit = cache["prob"], cache["logit"]
        b = prob.shape[0]
        inside = (prob > PROB_CLAMP) & (prob < 1 - PROB_CLAMP) & (np.abs(logit) < LOGIT_CLAMP)
        g = np.where(inside, (prob - labels) / b, 0.0)

        grads: dict = {}
        sparse: dict[str, list] = {}
        acts = cache["acts"]
        n_layers = len(cfg.hidden) + 1
        gz = g[:, None]
        for i in range(n_layers, 0, -1):
            grads[f"head/w{i}"] = acts[i - 1].T @ gz
            grads[f"head/b{i}"] = gz.sum(axis=0)
            ga = gz @ p[f"head/w{i}"].T
            if i > 1:
                gz = ga * (acts[i - 1] > 0)
        gx = ga
        h = self.schema.inherent_dim
        du = cfg.user_dim
        interest_dim = h if cfg.history == "avgpool" else cfg.d_out
        g_user = gx[:, :du]
        g_q = gx[:, du : du + h].copy()
        g_interest = gx[:, du + h : du + h + interest_dim]
        g_recent = gx[:, du + h + interest_dim :]

        batch: Batch = cache["batch"]
        catalog = cache["catalog"]
        _acc(sparse, "emb/user_id", batch.users, g_user)
        self._pool_backward(sparse, batch.recent_pool, catalog, g_recent)

        if cfg.history == "avgpool":
            self._pool_backward(sparse, batch.full_pool, catalog, g_interest)
        else:
            sel: Batch = cache["sel"]
            q, kh, kc4, kfull = cache["q"], cache["kh"], cache["kc4"], cache["kfull"]
            grads["att/wo"] = cache["hcat"].T @ g_interest
            g_hcat = g_interest @ p["att/wo"].T
            g_kfull = np.zeros_like(kfull)
            g_kc4 = np.zeros_like(kc4)
            dv = cfg.d_v
            scale = 1.0 / math.sqrt(cfg.d_k)
            for a in range(cfg.n_heads):
                hc = cache["heads"][a]
                g_h = g_hcat[:, a * dv : (a + 1) * dv]
                w, v = hc["w"], hc["v"]
                g_w = np.einsum("bv,blv->bl", g_h, v)
                g_v = w[:, :, None] * g_h[:, None, :]
                grads[f"att/h{a}/wv"] = np.einsum("bli,blv->iv", kfull, g_v)
                g_kfull += g_v @ p[f"att/h{a}/wv"].T
                g_alpha = w * (g_w - np.sum(w * g_w, axis=1, keepdims=True))
                g_khw = g_alpha[:, :, None] * hc["qp"][:, None, :] * scale
                g_qp = np.einsum("bl,bld->bd", g_alpha, hc["khw"]) * scale
                grads[f"att/h{a}/wh"] = np.einsum("blh,bld->hd", kh, g_khw)
                g_kfull[..., :h] += g_khw @ p[f"att/h{a}/wh"].T
                grads[f"att/h{a}/wq"] = q.T @ g_qp
                g_q += g_qp @ p[f"att/h{a}/wq"].T
                grads[f"att/h{a}/beta"] = np.einsum("bl,blj->j", g_alpha, hc["proj"])
                g_proj = g_alpha[:, :, None] * p[f"att/h{a}/beta"]
                grads[f"att/h{a}/wc"] = np.einsum("blj,bljc->jc", g_proj, kc4)
                g_kc4 += g_proj[..., None] * p[f"att/h{a}/wc"]
            g_kc = g_kfull[..., h:] + g_kc4.reshape(*g_kc4.shape[:2], g_kfull.shape[-1] - h)
            self._inherent_backward(sparse, sel.unit_cat, g_kfull[..., :h], sel.unit_mask)
            self._cross_backward(sparse, sel.unit_cross, g_kc, sel.unit_mask)

        self._inherent_backward(sparse, batch.target_cat, g_q, None)
        for name, (rows, vals) in sparse.items():
            rows = np.concatenate(rows)
            vals = np.concatenate(vals)
            uniq, inv = np.unique(rows, return_inverse=True)
            acc = np.zeros((uniq.shape[0], vals.shape[1]))
            np.add.at(acc, inv, vals)
            grads[name] = (uniq, acc)
        for name in self.params:
            grads.setdefault(name, np.zeros_like(self.params[name]) if not name.startswith("emb/") else _empty_rows(self.params[name]))
        for name, gr in grads.items():
            vals = gr[1] if isinstance(gr, tuple) else gr
            if not np.all(np.isfinite(vals)):
                raise NumericError(f"non-finite gradient for parameter {name}")
        return grads

    def _inherent_backward(self, sparse, cat, g, mask) -> None:
        off = 0
        for j, f in enumerate(self.schema.categorical):
            gf = g[..., off : off + f.dim]
            idx = cat[..., j]
            if mask is not None:
                gf, idx = gf[mask], idx[mask]
            _acc(sparse, f"emb/{f.name}", idx.reshape(-1), gf.reshape(-1, f.dim))
            off += f.dim

    def _cross_backward(self, sparse, cross, g, mask) -> None:
        off = 0
        for j, f in enumerate(self.schema.cross):
            gf = g[..., off : off + f.dim][mask]
            _acc(sparse, f"emb/{f.name}", cross[..., j][mask].reshape(-1), gf.reshape(-1, f.dim))
            off += f.dim

    def _pool_backward(self, sparse, pool: sp.csr_matrix, catalog, g) -> None:
        """Backprop through ``pool @ table[catalog column]``; numerical columns are data."""
        touched = np.unique(pool.indices)
        if touched.size == 0:
            return
        pt = pool[:, touched].T.tocsr()  # (n_touched, B)
        off = 0
        for j, f in enumerate(self.schema.categorical):
            gi = pt @ g[:, off : off + f.dim]  # gradient per touched item
            _acc(sparse, f"emb/{f.name}", catalog.categorical[touched, j], gi)
            off += f.dim

    # -- inference helpers ------------------------------------------------------

    def predict(self, batch: Batch, catalog) -> np.ndarray:
        return self.forward(batch, catalog)[0]

    def long_term_interest_reference(self, q, units: HistoryUnits):
        """Single-sample path through :mod:`lifeseq.attention` (used for inspection and tests)."""
        from .attention import SplitEmbeddings, retrieve_and_aggregate

        kh = self.inherent(units.cat, units.num)
        kc = self.cross_embed(units.cross)
        return retrieve_and_aggregate(
            q,
            SplitEmbeddings(kh, kc),
            self.attention_params(),
            units.sizes,
            self.cfg.topk,
            self.cfg.reweight_gsu,
            self.cfg.reweight_esu,
        )


def _cross_width(schema: Schema) -> int:
    dims = {f.dim for f in schema.cross}
    if len(dims) > 1:
        raise ValueError("all cross fields must share one embedding dim")
    return dims.pop() if dims else 8


def _acc(sparse: dict, name: str, rows, vals) -> None:
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size:
        sparse.setdefault(name, ([], []))
        sparse[name][0].append(rows)
        sparse[name][1].append(np.asarray(vals).reshape(rows.size, -1))


def _empty_rows(table: np.ndarray):
    return (np.zeros(0, dtype=np.int64), np.zeros((0, table.shape[1])))


def densify(grad, shape) -> np.ndarray:
    if isinstance(grad, tuple):
        out = np.zeros(shape)
        out[grad[0]] = grad[1]
        return out
    return grad


# ----------------------------------------------------------------------------
# loss

def bce_loss(pred, labels, flags=None) -> float:
    """Mean binary cross-entropy; predictions are clamped to [1e-12, 1 - 1e-12]."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    clipped = np.clip(pred, PROB_CLAMP, 1 - PROB_CLAMP)
    if flags is not None:
        flags.add("prediction_clamped", int(np.sum(clipped != pred)))
    return float(-np.mean(labels * np.log(clipped) + (1 - labels) * np.log1p(-clipped)))


# ----------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if isinstance(g, tuple):
                rows, vals = g
                params[name][rows] -= self.lr * vals
            else:
                if self.weight_decay:
                    g = g + self.weight_decay * params[name]
                params[name] -= self.lr * g


class Adam:
    """Adam; embedding tables use lazy updates touching only the gradient's rows."""

    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay: float = 0.0):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            if isinstance(g, tuple):
                rows, vals = g
                if rows.size == 0:
                    continue
                m[rows] = self.b1 * m[rows] + (1 - self.b1) * vals
                v[rows] = self.b2 * v[rows] + (1 - self.b2) * vals**2
                p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
            else:
                if self.weight_decay:
                    g = g + self.weight_decay * p
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: CtrModel
    losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)


def train(model: CtrModel, data, cfg: TrainConfig = TrainConfig(), on_epoch=None) -> TrainResult:
    """Mini-batch training over ``data`` (a :class:`lifeseq.dataset.ImpressionData`).

    Raises :class:`NumericError` on a non-finite gradient or when the epoch loss stays
    above ``divergence_factor`` times the initial loss for ``divergence_patience`` epochs.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    model = model.copy()
    opt = Adam(cfg.lr, weight_decay=cfg.weight_decay) if cfg.optimizer == "adam" else SGD(cfg.lr, cfg.weight_decay)
    rng = make_rng(cfg.seed, 0x7A1)
    result = TrainResult(model)
    initial = None
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = data.batch(idx, model.cfg)
            prob, cache = model.forward(batch, data.catalog)
            if initial is None:
                initial = bce_loss(prob, batch.labels)
            total += bce_loss(prob, batch.labels) * len(idx)
            grads = model.backward(cache, batch.labels)
            if cfg.lr > 0:
                opt.step(model.params, grads)
                model.version += 1
        loss = total / n
        result.losses.append(loss)
        result.epoch_seconds.append(time.perf_counter() - start)
        log.info("epoch %d loss %.6f (%.2fs)", epoch, loss, result.epoch_seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch, loss, result.epoch_seconds[-1])
        if not math.isfinite(loss):
            raise NumericError(f"epoch {epoch}: non-finite loss")
        if initial is not None and loss > cfg.divergence_factor * initial:
            bad_epochs += 1
            if bad_epochs >= cfg.divergence_patience:
                raise NumericError(
                    f"training diverged: loss {loss:.4g} > {cfg.divergence_factor}x initial {initial:.4g} "
                    f"for {bad_epochs} epochs"
                )
        else:
            bad_epochs = 0
    return result
