import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lifeseq.compressor import Cluster, CompressedHistory
from lifeseq.metrics import UndefinedMetric, auc, cluster_accuracy, compression_ratio, gauc, gsu_recall


def pairwise_auc(scores, labels):
    """O(n^2) oracle: fraction of (pos, neg) pairs ranked correctly, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    hits = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return hits / (len(pos) * len(neg))


def _history(sizes, dim=3, seed=0):
    """Clusters of the given sizes over consecutive positions, random embeddings."""
    rng = np.random.default_rng(seed)
    t = int(sum(sizes))
    emb = rng.normal(size=(t, dim))
    clusters, lo = [], 0
    for n in sizes:
        pos = np.arange(lo, lo + n)
        clusters.append(Cluster(pos.copy(), pos, emb[pos].mean(axis=0), 1))
        lo += n
    return CompressedHistory(0, t, clusters), emb


class TestAuc:
    def test_perfect_and_reversed(self):
        s = np.arange(10.0)
        y = (s >= 5).astype(int)
        assert auc(s, y) == 1.0
        assert auc(-s, y) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_pairwise_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s = np.round(rng.normal(size=200), 1)  # rounding forces ties
        y = rng.integers(0, 2, 200)
        assert abs(auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            auc([0.1, 0.2], [1, 1])

    def test_all_tied_is_half(self):
        assert auc(np.zeros(6), [0, 1, 0, 1, 1, 0]) == 0.5

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50, unique=True), st.data())
    def test_threshold_split_is_one(self, scores, data):
        s = np.array(scores)
        cut = data.draw(st.integers(1, len(s) - 1))
        y = (np.argsort(np.argsort(s)) >= cut).astype(int)
        assert auc(s, y) == 1.0


class TestGauc:
    def test_weighted_example(self):
        # user 0: perfect (AUC 1.0) on 10 impressions; user 1: all tied (AUC 0.5) on 30
        s0 = np.arange(10.0)
        y0 = (s0 >= 5).astype(int)
        s1 = np.zeros(30)
        y1 = np.arange(30) % 2
        r = gauc(np.concatenate([s0, s1]), np.concatenate([y0, y1]), np.repeat([0, 1], [10, 30]))
        assert r.value == 0.625 and r.n_users == 2 and r.skipped == 0

    def test_single_user_equals_auc(self):
        rng = np.random.default_rng(0)
        s, y = rng.normal(size=50), rng.integers(0, 2, 50)
        assert gauc(s, y, np.full(50, 7)).value == auc(s, y)

    def test_single_class_users_skipped(self):
        s = np.array([0.1, 0.9, 0.3, 0.4])
        y = np.array([0, 1, 1, 1])
        r = gauc(s, y, np.array([0, 0, 1, 1]))
        assert r.value == 1.0 and r.skipped == 1

    def test_all_single_class_undefined(self):
        with pytest.raises(UndefinedMetric):
            gauc([0.1, 0.2, 0.3], [1, 1, 0], [0, 0, 1])

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        s, y, u = rng.normal(size=80), rng.integers(0, 2, 80), rng.integers(0, 5, 80)
        perm = rng.permutation(80)
        assert gauc(s, y, u).value == pytest.approx(gauc(s[perm], y[perm], u[perm]).value, abs=1e-15)


class TestClusterAccuracy:
    def test_singletons(self):
        hist, emb = _history([1] * 8)
        assert cluster_accuracy(hist, emb).value == pytest.approx(1.0, abs=1e-15)

    def test_antipodal_pair_skipped(self):
        emb = np.array([[1.0, 0.0], [-1.0, 0.0]])
        hist = CompressedHistory(0, 2, [Cluster(np.array([0, 1]), np.array([0, 1]), emb.mean(axis=0), 1)])
        r = cluster_accuracy(hist, emb)
        assert r.value == 0.0 and r.skipped == 2 and r.n_items == 0

    def test_zero_member_skipped(self):
        emb = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.2]])
        hist = CompressedHistory(0, 3, [Cluster(np.arange(3), np.arange(3), emb.mean(axis=0), 1)])
        r = cluster_accuracy(hist, emb)
        assert r.skipped == 1 and r.n_items == 2

    def test_empty_undefined(self):
        with pytest.raises(UndefinedMetric):
            cluster_accuracy(CompressedHistory(0, 0), np.zeros((1, 2)))

    def test_known_value(self):
        emb = np.array([[1.0, 0.0], [0.0, 1.0]])
        hist = CompressedHistory(0, 2, [Cluster(np.arange(2), np.arange(2), emb.mean(axis=0), 1)])
        assert cluster_accuracy(hist, emb).value == pytest.approx(np.sqrt(0.5), abs=1e-15)

    @given(st.floats(1e-3, 1e3), st.integers(0, 50))
    def test_scale_invariant(self, c, seed):
        hist, emb = _history([3, 5, 2], seed=seed)
        scaled = CompressedHistory(0, hist.source_length, [Cluster(k.member_ids, k.positions, c * k.centroid, 1) for k in hist.clusters])
        assert cluster_accuracy(scaled, c * emb).value == pytest.approx(cluster_accuracy(hist, emb).value, abs=1e-12)


class TestGsuRecall:
    def test_all_clusters_retrieved(self):
        hist, _ = _history([4, 3, 6, 2])
        rng = np.random.default_rng(0)
        assert gsu_recall(hist, rng.normal(size=15), rng.normal(size=4), k=4) == 1.0

    def test_singletons_with_matching_scores(self):
        hist, _ = _history([1] * 10)
        s = np.random.default_rng(1).normal(size=10)
        for k in range(1, 11):
            assert gsu_recall(hist, s, s, k) == 1.0

    def test_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        sizes = rng.integers(1, 8, 12)
        hist, _ = _history(sizes)
        t = hist.source_length
        item = rng.normal(size=t)
        clus = rng.normal(size=12)
        k = 3
        chosen = set(np.argsort(-clus, kind="stable")[:k].tolist())
        covered = {p for i in chosen for p in hist.clusters[i].positions.tolist()}
        m = int(np.ceil(k * t / 12))
        truth = np.argsort(-item, kind="stable")[:m]
        assert gsu_recall(hist, item, clus, k) == pytest.approx(np.mean([p in covered for p in truth]), abs=1e-15)

    @given(st.integers(0, 1000), st.integers(1, 10))
    def test_nondecreasing_in_k(self, seed, truth_k):
        rng = np.random.default_rng(seed)
        hist, _ = _history(rng.integers(1, 6, 10), seed=seed)
        item = rng.normal(size=hist.source_length)
        clus = rng.normal(size=10)
        recalls = [gsu_recall(hist, item, clus, k, truth_k) for k in range(1, 11)]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_growing_reference_can_drop(self):
        # with the reference set tied to k, recall is not monotone; truth_k fixes that
        hist, _ = _history([1, 1, 1])
        item = np.array([3.0, 2.0, 1.0])
        clus = np.array([3.0, 1.0, 2.0])
        assert gsu_recall(hist, item, clus, 1) == 1.0
        assert gsu_recall(hist, item, clus, 2) == 0.5
        assert gsu_recall(hist, item, clus, 2, truth_k=1) == 1.0

    def test_empty_history(self):
        assert gsu_recall(CompressedHistory(0, 0), np.zeros(0), np.zeros(0), 5) == 1.0


def test_compression_ratio():
    a, _ = _history([2, 3])
    b, _ = _history([5])
    assert compression_ratio([a, b]) == pytest.approx(3 / 10)
    assert compression_ratio([CompressedHistory(0, 0)]) is None
