import numpy as np
import pytest

from cdnet import tensor as T
from cdnet.data import PAD, SynthConfig, make_batch, synth_generate, synth_schema
from cdnet.embeddings import FeatureEncoder
from cdnet.trainer import Adam


@pytest.fixture
def setup():
    cfg = SynthConfig(n_items=400, n_users=20, seq_len=10, min_valid=4, max_same_category=4, max_relevant=2)
    samples = synth_generate(cfg, 12, seed=0)
    enc = FeatureEncoder(synth_schema(cfg), 6, np.random.default_rng(0), np.float64)
    return enc, samples


class TestFeatureEncoder:
    def test_context_shape(self, setup):
        enc, samples = setup
        assert enc.encode_context(make_batch(samples, np.arange(4))).shape == (4, 5, 6)

    def test_identical_ids_identical_encoding(self, setup):
        enc, samples = setup
        out = enc.encode_context(make_batch(samples, [3, 3])).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_padding_rows_are_zero(self, setup):
        enc, samples = setup
        for table in enc.tables.values():
            np.testing.assert_array_equal(table.data[PAD], 0.0)
        s, mask = enc.encode_behaviors(make_batch(samples, np.arange(12), pad_to_max=True))
        assert s.shape == (12, 10, 6)
        np.testing.assert_array_equal(s.data[~mask], 0.0)

    def test_target_matches_behavior_with_same_ids(self, setup):
        enc, samples = setup
        batch = make_batch(samples, [0])
        batch.items[0, 0] = batch.context[0, 1]
        batch.categories[0, 0] = batch.context[0, 2]
        s, _ = enc.encode_behaviors(batch)
        np.testing.assert_array_equal(enc.encode_target(batch).data[0], s.data[0, 0])

    def test_weight_sharing(self, setup):
        enc, samples = setup
        batch = make_batch(samples, [0])
        batch.items[0, 0] = batch.context[0, 1]
        batch.categories[0, 0] = batch.context[0, 2]
        enc.tables["item"].data[batch.context[0, 1]] += 1.5
        s, _ = enc.encode_behaviors(batch)
        np.testing.assert_array_equal(enc.encode_target(batch).data[0], s.data[0, 0])

    def test_target_gradient_reaches_both_tables(self, setup):
        enc, samples = setup
        batch = make_batch(samples, [0, 1])
        T.backward(T.sum(T.mul(enc.encode_target(batch), 1.0)))
        item_row, cat_row = batch.context[0, 1], batch.context[0, 2]
        assert np.all(enc.tables["item"].grad[item_row] != 0)
        assert np.all(enc.tables["category"].grad[cat_row] != 0)

    def test_target_norm_finite(self, setup):
        enc, samples = setup
        assert np.all(np.isfinite(enc.encode_target(make_batch(samples, np.arange(12))).data))

    def test_padding_row_survives_optimizer_steps(self, setup):
        enc, samples = setup
        opt = Adam(enc.parameters(), lr=0.1, weight_decay=0.01)
        for i in range(5):
            s, _ = enc.encode_behaviors(make_batch(samples, np.arange(12), pad_to_max=True))
            loss = T.sum(T.mul(T.add(s, 1.0), T.add(s, 1.0)))
            T.backward(loss, enc.parameters())
            opt.step()
        for table in enc.tables.values():
            np.testing.assert_array_equal(table.data[PAD], 0.0)
