import math

import numpy as np
import pytest

from conftest import gradient_check, small_catalog, tiny_batch
from lifeseq.core import BehaviorSequence
from lifeseq.datagen import Impressions
from lifeseq.model import (
    LOGIT_CLAMP,
    CtrModel,
    ModelConfig,
    NumericError,
    TrainConfig,
    bce_loss,
    train,
)
from lifeseq.pipeline import ImpressionData

TINY = ModelConfig(d_k=3, d_v=2, d_out=3, n_heads=2, hidden=(4, 3), user_dim=2, topk=4)


def _tiny_model(catalog, cfg=TINY, seed=0):
    return CtrModel.init(catalog.schema, 3, cfg, seed=seed)


def _separable(n_users=4, n_items=40, per_user=20, seed=0):
    """Clicks depend only on the target item (id < n/2), so the task is separable."""
    catalog = small_catalog(n_items, seed)
    rng = np.random.default_rng(seed)
    seqs = []
    for u in range(n_users):
        ids = rng.integers(0, n_items, 30)
        seqs.append(BehaviorSequence(u, ids, rng.uniform(size=30), np.arange(30) * 60))
    users = np.repeat(np.arange(n_users), per_user)
    items = rng.integers(0, n_items, users.size)
    imp = Impressions(users, items, np.arange(users.size), (items < n_items // 2).astype(np.int64))
    return ImpressionData(catalog, imp, seqs, None)


class TestGradients:
    @pytest.mark.parametrize("history", ["clusters", "recent", "avgpool"])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_differences(self, history, seed):
        errors = gradient_check(seed=seed, history=history)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, (worst, errors[worst])

    def test_every_parameter_receives_gradient(self):
        errors = gradient_check(seed=0)
        catalog = small_catalog(12, 0, id_dim=2, n_authors=3, cross_dim=2)
        assert set(errors) == set(_tiny_model(catalog).params)

    def test_clamped_logit_has_zero_gradient(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        model.params["head/b3"][:] = 10 * LOGIT_CLAMP
        batch = tiny_batch(catalog)
        _, cache = model.forward(batch, catalog)
        grads = model.backward(cache, batch.labels)
        assert not np.any(grads["head/b3"]) and not np.any(grads["head/w1"])


class TestForward:
    def test_zero_head_gives_half(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        model.params["head/w3"][:] = 0.0
        model.params["head/b3"][:] = 0.0
        np.testing.assert_array_equal(model.predict(tiny_batch(catalog), catalog), 0.5)

    @pytest.mark.parametrize("bias", [1e3, -1e3])
    def test_logit_clamp(self, bias):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        model.params["head/w3"][:] = 0.0
        model.params["head/b3"][:] = bias
        prob = model.predict(tiny_batch(catalog), catalog)
        expected = 1.0 / (1.0 + math.exp(-math.copysign(LOGIT_CLAMP, bias)))
        np.testing.assert_array_equal(prob, expected)

    def test_interest_matches_single_sample_reference(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog, ModelConfig(d_k=3, d_v=2, d_out=3, n_heads=2, hidden=(4, 3), user_dim=2, topk=2))
        batch = tiny_batch(catalog, lengths=(4, 3, 1), seed=5)
        _, cache = model.forward(batch, catalog)
        interest = cache["hcat"] @ model.params["att/wo"]
        from lifeseq.model import HistoryUnits

        for i in range(len(batch)):
            m = batch.unit_mask[i]
            units = HistoryUnits(batch.unit_cat[i][m], batch.unit_num[i][m], batch.unit_cross[i][m], batch.unit_sizes[i][m])
            ref, _ = model.long_term_interest_reference(cache["q"][i], units)
            np.testing.assert_allclose(interest[i], ref, rtol=0, atol=1e-12)

    def test_cold_user_has_zero_interest(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        batch = tiny_batch(catalog, lengths=(0, 0), seed=1)
        prob, cache = model.forward(batch, catalog)
        assert not cache["hcat"].any() and np.all(np.isfinite(prob))
        grads = model.backward(cache, batch.labels)
        assert not grads["att/h0/wq"].any()

    def test_padding_does_not_change_prediction(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        batch = tiny_batch(catalog, lengths=(2, 4), seed=2)
        together = model.predict(batch, catalog)
        alone = tiny_batch(catalog, lengths=(2, 4), seed=2)
        alone.unit_cat, alone.unit_num = alone.unit_cat[:1, :2], alone.unit_num[:1, :2]
        alone.unit_cross, alone.unit_sizes = alone.unit_cross[:1, :2], alone.unit_sizes[:1, :2]
        alone.unit_mask = alone.unit_mask[:1, :2]
        alone.users, alone.target_cat, alone.target_num = alone.users[:1], alone.target_cat[:1], alone.target_num[:1]
        alone.recent_pool, alone.labels = alone.recent_pool[:1], alone.labels[:1]
        assert model.predict(alone, catalog)[0] == pytest.approx(together[0], abs=1e-12)

    def test_parameter_count(self):
        catalog = small_catalog(12, id_dim=2, n_authors=3, cross_dim=2)
        model = _tiny_model(catalog)
        h = 2 + 2 + 1  # item_id, author_id, duration
        jc = 2 * 2
        per_head = 2 * h * 3 + 2 * 2 + 2 + (h + jc) * 2
        emb = 12 * 2 + 3 * 2 + 10 * 2 + 16 * 2 + 3 * 2
        d_in = 2 + h + 3 + h
        head = d_in * 4 + 4 + 4 * 3 + 3 + 3 + 1
        assert model.n_parameters() == emb + 2 * per_head + 2 * 2 * 3 + head

    def test_shape_mismatch_rejected(self):
        catalog = small_catalog(12)
        model = _tiny_model(catalog)
        params = dict(model.params)
        params["att/wo"] = np.zeros((5, 5))
        with pytest.raises(ValueError, match="att/wo"):
            CtrModel(catalog.schema, 3, TINY, params)


class TestLoss:
    def test_half_gives_ln2(self):
        assert bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), abs=1e-15)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.01, 0.99, 50)
        y = rng.integers(0, 2, 50)
        ref = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y)) / 50
        assert bce_loss(p, y) == pytest.approx(ref, rel=1e-12)

    def test_extreme_predictions_stay_finite(self):
        loss = bce_loss([0.0, 1.0], [1, 0])
        assert math.isfinite(loss) and loss == pytest.approx(-math.log(1e-12), rel=1e-6)


class TestTraining:
    def test_zero_lr_leaves_parameters(self):
        data = _separable()
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent", d_k=4, d_v=4, d_out=4))
        out = train(model, data, TrainConfig(lr=0.0, epochs=2, batch_size=16)).model
        for name, p in model.params.items():
            np.testing.assert_array_equal(out.params[name], p)

    @pytest.mark.parametrize("optimizer,lr", [("adam", 1e-2), ("sgd", 0.5)])
    def test_separable_toy_set(self, optimizer, lr):
        data = _separable()
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent", d_k=4, d_v=4, d_out=4))
        res = train(model, data, TrainConfig(optimizer=optimizer, lr=lr, epochs=50, batch_size=16))
        assert res.losses[-1] < 0.1

    def test_deterministic(self):
        data = _separable()
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent", d_k=4, d_v=4, d_out=4), seed=3)
        cfg = TrainConfig(lr=1e-2, epochs=3, batch_size=16, seed=7)
        a, b = train(model, data, cfg), train(model, data, cfg)
        assert a.losses == b.losses
        for name in a.model.params:
            assert np.array_equal(a.model.params[name], b.model.params[name])

    def test_input_model_untouched(self):
        data = _separable()
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent", d_k=4, d_v=4, d_out=4))
        before = {k: v.copy() for k, v in model.params.items()}
        train(model, data, TrainConfig(lr=1e-2, epochs=1, batch_size=16))
        assert all(np.array_equal(before[k], model.params[k]) for k in before)

    def test_untouched_embedding_rows_stay_fixed(self):
        data = _separable()
        sub = data.subset(data.impressions.subset(data.impressions.item_ids != 0))
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="avgpool", d_k=4, d_v=4, d_out=4))
        used = np.unique(np.concatenate([s for s in (sub.impressions.item_ids,)]))
        pooled = np.unique(sub.full_pool.indices)
        untouched = np.setdiff1d(np.arange(40), np.union1d(used, pooled))
        out = train(model, sub, TrainConfig(lr=1e-2, epochs=2, batch_size=16)).model
        if untouched.size:
            np.testing.assert_array_equal(out.params["emb/item_id"][untouched], model.params["emb/item_id"][untouched])

    def test_divergence_raises(self):
        data = _separable()
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent", d_k=4, d_v=4, d_out=4))
        with pytest.raises(NumericError):
            train(model, data, TrainConfig(optimizer="sgd", lr=1e9, epochs=8, batch_size=16))

    def test_empty_set_rejected(self):
        data = _separable()
        empty = data.subset(data.impressions.subset(np.zeros(len(data), dtype=bool)))
        model = CtrModel.init(data.catalog.schema, 4, ModelConfig(history="recent"))
        with pytest.raises(ValueError):
            train(model, empty, TrainConfig())
