import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifeseq.datagen import COHORTS, GenConfig, bayes_scores, generate
from lifeseq.metrics import auc
from lifeseq.storage import store_catalog, store_impressions, store_logs

SMALL = dict(n_users=20, n_items=300, n_authors=30, id_dim=8, cohort_medians=(40.0, 80.0, 160.0), impressions_per_user=20)


def _write_all(data, root):
    store_catalog(root / "catalog.jsonl", data.catalog)
    store_logs(root / "logs.jsonl", data.sequences)
    store_impressions(root / "impressions.jsonl", data.impressions, data.cutoff)
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


class TestGenerate:
    def test_cold_user(self):
        data = generate(GenConfig(n_users=1, length_override=0, n_items=50, n_authors=5, id_dim=4))
        assert len(data.sequences) == 1 and len(data.sequences[0]) == 0
        assert len(data.impressions) == GenConfig().impressions_per_user

    def test_byte_identical_for_fixed_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert _write_all(generate(GenConfig(**SMALL, seed=4)), a) == _write_all(generate(GenConfig(**SMALL, seed=4)), b)

    def test_seed_changes_data(self):
        a = generate(GenConfig(**SMALL, seed=0))
        b = generate(GenConfig(**SMALL, seed=1))
        assert a.impressions != b.impressions

    def test_bayes_scorer_auc(self):
        data = generate(GenConfig(n_users=100, n_items=2000, n_authors=200, id_dim=16, cohort_medians=(50.0, 100.0, 200.0), seed=0))
        assert auc(bayes_scores(data), data.impressions.labels) > 0.75

    def test_interest_counts(self):
        data = generate(GenConfig(**SMALL))
        assert all(1 <= len(c) <= 5 for c in data.truth.user_interests)
        assert set(data.truth.user_cohort.tolist()) <= set(range(len(COHORTS)))

    def test_on_interest_items_complete_more(self):
        data = generate(GenConfig(**SMALL))
        on, off = [], []
        for s, centers in zip(data.sequences, data.truth.user_interests):
            hit = np.isin(data.truth.item_center[s.item_ids], centers)
            on.append(s.completion_ratios[hit])
            off.append(s.completion_ratios[~hit])
        assert np.concatenate(on).mean() > np.concatenate(off).mean() + 0.1

    def test_history_lengths_follow_cohorts(self):
        data = generate(GenConfig(n_users=60, n_items=300, n_authors=30, id_dim=8, cohort_medians=(20.0, 200.0, 2000.0)))
        lengths = np.array([len(s) for s in data.sequences])
        medians = [np.median(lengths[data.truth.user_cohort == c]) for c in range(3)]
        assert medians[0] < medians[1] < medians[2]

    @pytest.mark.parametrize(
        "bad",
        [dict(n_users=0), dict(cohort_fractions=(0.5, 0.5, 0.5)), dict(min_interests=3, max_interests=2), dict(affinity="sum")],
    )
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            GenConfig(**bad)


class TestInvariants:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_records_well_formed(self, seed):
        data = generate(GenConfig(n_users=5, n_items=100, n_authors=10, id_dim=4, cohort_medians=(10.0, 30.0, 90.0), impressions_per_user=6, seed=seed))
        for s in data.sequences:
            assert np.all((s.completion_ratios >= 0) & (s.completion_ratios <= 1))
            assert np.all(np.diff(s.timestamps) >= 0)
            assert np.all((s.item_ids >= 0) & (s.item_ids < 100))
        imp = data.impressions
        assert set(np.unique(imp.labels).tolist()) <= {0, 1}

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_split_is_leakage_free(self, seed):
        data = generate(GenConfig(n_users=6, n_items=100, n_authors=10, id_dim=4, cohort_medians=(10.0, 30.0, 90.0), impressions_per_user=10, seed=seed))
        train, test = data.train_test()
        assert len(train) + len(test) == len(data.impressions)
        for u in np.unique(data.impressions.user_ids):
            tr = train.timestamps[train.user_ids == u]
            te = test.timestamps[test.user_ids == u]
            if tr.size and te.size:
                assert te.min() >= tr.max()
        # behavior logs end before any impression
        last = max((s.timestamps[-1] for s in data.sequences if len(s)), default=0)
        assert last <= data.impressions.timestamps.min()
