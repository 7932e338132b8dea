"""Cluster-aware target attention.

Relevance of each history unit to the target is a scaled dot product of the
projected inherent features plus a learned weighting of per-feature cross
projections. Adding ``ln n`` to those scores makes a cluster of ``n`` items
count like ``n`` identical items in the softmax. Retrieval (top-k by shifted
score) and aggregation (multi-head softmax pooling) share the same scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TOPK = 100
DEFAULT_HEADS = 4


@dataclass
class SplitEmbeddings:
    """Behavior matrix split column-wise into inherent (``kh``) and cross (``kc``) parts."""

    kh: np.ndarray  # (L, H)
    kc: np.ndarray  # (L, C), C = sum of cross dims

    def __post_init__(self):
        self.kh = np.asarray(self.kh, dtype=np.float64)
        if self.kh.ndim == 1:
            self.kh = self.kh[None, :]
        kc = np.asarray(self.kc, dtype=np.float64)
        self.kc = kc if kc.ndim == 2 and kc.shape[0] == 0 else kc.reshape(self.kh.shape[0], -1)

    def __len__(self) -> int:
        return self.kh.shape[0]

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.kh, self.kc], axis=1)

    def take(self, idx) -> "SplitEmbeddings":
        idx = np.asarray(idx, dtype=np.int64)
        return SplitEmbeddings(self.kh[idx], self.kc[idx])


@dataclass
class HeadParams:
    wq: np.ndarray  # (H, d_k)
    wh: np.ndarray  # (H, d_k)
    wc: np.ndarray  # (J, c) one contraction vector per cross feature
    beta: np.ndarray  # (J,)
    wv: np.ndarray  # (H + J*c, d_v)

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wh": self.wh, "wc": self.wc, "beta": self.beta, "wv": self.wv}


@dataclass
class AttentionParams:
    heads: list[HeadParams]
    wo: np.ndarray  # (n_heads * d_v, d_out)
    version: int = 0

    @classmethod
    def init(
        cls,
        inherent_dim: int,
        n_cross: int,
        cross_dim: int,
        rng: np.random.Generator,
        d_k: int = 32,
        d_v: int = 32,
        d_out: int = 32,
        n_heads: int = DEFAULT_HEADS,
    ) -> "AttentionParams":
        def glorot(*shape):
            bound = math.sqrt(6.0 / (shape[0] + shape[-1]))
            return rng.uniform(-bound, bound, size=shape)

        heads = []
        for _ in range(n_heads):
            heads.append(
                HeadParams(
                    wq=glorot(inherent_dim, d_k),
                    wh=glorot(inherent_dim, d_k),
                    wc=glorot(n_cross, cross_dim) if n_cross else np.zeros((0, cross_dim)),
                    beta=np.zeros(n_cross),
                    wv=glorot(inherent_dim + n_cross * cross_dim, d_v),
                )
            )
        return cls(heads, glorot(n_heads * d_v, d_out))

    @property
    def n_heads(self) -> int:
        return len(self.heads)


@dataclass
class RelevanceScores:
    alpha: np.ndarray
    alpha_prime: np.ndarray
    sizes: np.ndarray


def rowwise_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` whose rows do not depend on which other rows are in ``x``
    (BLAS blocking does not give that guarantee)."""
    return np.einsum("ih,hd->id", x, w)


@dataclass
class InherentCache:
    """Projected inherent rows keyed by integer item id, valid for one parameter version.

    A version change (any update of W^h) invalidates every row.
    """

    version: int | None = None
    table: np.ndarray | None = None
    filled: np.ndarray | None = None
    hits: int = 0
    misses: int = 0

    def clear(self) -> None:
        self.version = self.table = self.filled = None

    def _reset(self, n_ids: int, width: int, version: int) -> None:
        self.version = version
        self.table = np.zeros((n_ids, width))
        self.filled = np.zeros(n_ids, dtype=bool)

    def _grow(self, n_ids: int) -> None:
        extra = n_ids - self.table.shape[0]
        self.table = np.vstack([self.table, np.zeros((extra, self.table.shape[1]))])
        self.filled = np.concatenate([self.filled, np.zeros(extra, dtype=bool)])


def project_inherent(
    kh: np.ndarray,
    wh: np.ndarray,
    cache: InherentCache | None = None,
    keys=None,
    version: int = 0,
) -> np.ndarray:
    """Project inherent features. With a cache and per-row integer item ids, rows
    seen before under the same ``version`` are gathered instead of recomputed.
    Cached and uncached results are bit-identical."""
    kh = np.atleast_2d(np.asarray(kh, dtype=np.float64))
    if kh.shape[1] != wh.shape[0]:
        raise ValueError(f"shape mismatch: K_h has {kh.shape[1]} columns, W^h has {wh.shape[0]} rows")
    if cache is None or keys is None:
        return rowwise_matmul(kh, wh)
    keys = np.asarray(keys, dtype=np.int64)
    if keys.shape != (kh.shape[0],):
        raise ValueError("one key per row required")
    if keys.size and keys.min() < 0:
        raise ValueError("item keys must be non-negative")
    n_ids = int(keys.max()) + 1 if keys.size else 0
    if cache.version != version or cache.table is None or cache.table.shape[1] != wh.shape[1]:
        cache._reset(n_ids, wh.shape[1], version)
    elif n_ids > cache.table.shape[0]:
        cache._grow(n_ids)
    need = ~cache.filled[keys]
    if need.any():
        uniq, first = np.unique(keys[need], return_index=True)
        rows = np.flatnonzero(need)[first]
        cache.table[uniq] = rowwise_matmul(kh[rows], wh)
        cache.filled[uniq] = True
        cache.misses += int(uniq.size)
    cache.hits += int(keys.size - need.sum())
    return cache.table[keys]


def block_diagonal(wc: np.ndarray) -> np.ndarray:
    """Dense (J*c, J) matrix with ``wc[j]`` in block ``j`` and zeros elsewhere."""
    n_cross, c = wc.shape
    out = np.zeros((n_cross * c, n_cross))
    for j in range(n_cross):
        out[j * c : (j + 1) * c, j] = wc[j]
    return out


def project_cross(kc: np.ndarray, wc: np.ndarray) -> np.ndarray:
    """Contract each cross feature's slice to one column: (L, J*c) -> (L, J)."""
    kc = np.asarray(kc, dtype=np.float64)
    n_cross, c = wc.shape
    if kc.shape[-1] != n_cross * c:
        raise ValueError(f"shape mismatch: K_c width {kc.shape[-1]} != {n_cross}*{c}")
    return np.einsum("...jc,jc->...j", kc.reshape(*kc.shape[:-1], n_cross, c), wc)


def relevance(
    q: np.ndarray,
    split: SplitEmbeddings,
    head: HeadParams,
    sizes,
    reweight: bool = True,
) -> RelevanceScores:
    sizes = np.asarray(sizes)
    if sizes.shape != (len(split),):
        raise ValueError("one size per history unit required")
    if np.any(sizes < 1):
        raise ValueError("cluster sizes must be >= 1")
    qp = np.asarray(q, dtype=np.float64) @ head.wq
    alpha = project_inherent(split.kh, head.wh) @ qp / math.sqrt(head.d_k)
    if head.beta.size:
        alpha = alpha + project_cross(split.kc, head.wc) @ head.beta
    shift = np.log(sizes.astype(np.float64)) if reweight else np.zeros(len(split))
    return RelevanceScores(alpha, alpha + shift, sizes)


def gsu_scores(q, split: SplitEmbeddings, params: AttentionParams, sizes, reweight: bool = True) -> np.ndarray:
    """Retrieval score per unit: head-averaged relevance, plus ln n when reweighting."""
    alpha = np.mean([relevance(q, split, h, sizes, reweight=False).alpha for h in params.heads], axis=0)
    if reweight:
        alpha = alpha + np.log(np.asarray(sizes, dtype=np.float64))
    return alpha


def gsu_topk(scores, k: int = DEFAULT_TOPK) -> np.ndarray:
    """Indices of the ``k`` largest scores, best first; ties go to the lower index."""
    if isinstance(scores, RelevanceScores):
        scores = scores.alpha_prime
    scores = np.asarray(scores, dtype=np.float64)
    if k >= scores.shape[0]:
        return np.argsort(-scores, kind="stable")
    part = np.argpartition(-scores, k - 1)[:k]
    # argpartition breaks ties arbitrarily at the boundary; admit every tied index, then sort stably
    kth = scores[part].min()
    cand = np.flatnonzero(scores >= kth)
    return cand[np.argsort(-scores[cand], kind="stable")][:k]


def softmax(x: np.ndarray, mask: np.ndarray | None = None, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; masked-out entries get weight 0 and an all-masked row is all zeros."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        return np.zeros_like(x)
    if mask is None:
        m = np.max(x, axis=axis, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=axis, keepdims=True)
    xm = np.where(mask, x, -np.inf)
    m = np.max(xm, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(xm - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def esu_head(
    q, split: SplitEmbeddings, head: HeadParams, sizes, reweight: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """One attention head over the retrieved units. Returns ``(output, weights)``;
    an empty input gives a zero vector and empty weights (cold user)."""
    d_v = head.wv.shape[1]
    if len(split) == 0:
        return np.zeros(d_v), np.zeros(0)
    scores = relevance(q, split, head, sizes, reweight)
    w = softmax(scores.alpha_prime)
    return w @ (split.full @ head.wv), w


def long_term_interest(q, split: SplitEmbeddings, params: AttentionParams, sizes, reweight: bool = True) -> np.ndarray:
    outs = [esu_head(q, split, h, sizes, reweight)[0] for h in params.heads]
    return np.concatenate(outs) @ params.wo


def retrieve_and_aggregate(
    q,
    split: SplitEmbeddings,
    params: AttentionParams,
    sizes,
    k: int = DEFAULT_TOPK,
    reweight_gsu: bool = True,
    reweight_esu: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """GSU top-k followed by ESU; returns ``(interest, retrieved indices)``."""
    sizes = np.asarray(sizes)
    if len(split) == 0:
        return np.zeros(params.wo.shape[1]), np.zeros(0, dtype=np.int64)
    idx = gsu_topk(gsu_scores(q, split, params, sizes, reweight_gsu), k)
    return long_term_interest(q, split.take(idx), params, sizes[idx], reweight_esu), idx
