import numpy as np
import pytest

from cdnet import tensor as T
from cdnet.gradcheck import check_op
from cdnet.interaction import (Block, MultiHeadAttention, PerTokenFFN, PredictionHead, block_forward,
                               build_tokens, predict)
from cdnet.tensor import ShapeError, Tensor


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


class TestBuildTokens:
    def test_layout_and_count(self):
        rng = np.random.default_rng(0)
        core, gid, ctx = rand(rng, 2, 16, 4), rand(rng, 2, 4), rand(rng, 2, 5, 4)
        core_mask = np.ones((2, 16), bool)
        core_mask[1, 3:] = False
        tok = build_tokens(core, core_mask, gid, ctx)
        assert tok.x.shape == (2, 22, 4)
        np.testing.assert_array_equal(tok.x.data[:, 16], gid.data)
        np.testing.assert_array_equal(tok.x.data[:, 17:], ctx.data)
        assert (~tok.mask[1]).sum() == 13 and tok.mask[0].all()

    def test_ablated_layouts(self):
        rng = np.random.default_rng(1)
        ctx = rand(rng, 1, 5, 4)
        assert build_tokens(None, None, rand(rng, 1, 4), ctx).x.shape == (1, 6, 4)
        assert build_tokens(rand(rng, 1, 16, 4), np.ones((1, 16), bool), None, ctx).x.shape == (1, 21, 4)

    def test_width_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            build_tokens(None, None, rand(rng, 1, 3), rand(rng, 1, 5, 4))


class TestAttention:
    def test_weights_are_distributions_over_unmasked_columns(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAttention(8, 2, rng, np.float64)
        mask = np.array([[True, False, True, True, False], [True] * 5])
        _, w = mha(rand(rng, 2, 5, 8), mask, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w.data[0, :, :, ~mask[0]] == 0.0)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4, np.random.default_rng(0))

    def test_mac_count_matches_formula(self):
        rng = np.random.default_rng(4)
        t, d = 7, 8
        mha = MultiHeadAttention(d, 2, rng)
        with T.count_macs() as c:
            mha(rand(rng, 1, t, d), np.ones((1, t), bool))
        assert c["qk"] + c["av"] == 2 * t * t * d
        assert c["proj"] == 4 * t * d * d


class TestBlock:
    def test_gradient_t4_d8(self):
        rng = np.random.default_rng(5)
        block = Block(4, 8, 2, 2, rng, np.float64)
        mask = np.array([[True, True, False, True]])
        errs = check_op(lambda x: block_forward(x, block, mask), [rng.standard_normal((1, 4, 8))])
        assert max(errs) <= 1e-4

    def test_masked_rows_are_zero(self):
        rng = np.random.default_rng(6)
        block = Block(4, 8, 2, 2, rng, np.float64)
        mask = np.array([[True, False, True, True]])
        out = block(rand(rng, 1, 4, 8), mask).data
        np.testing.assert_array_equal(out[0, 1], 0.0)

    def test_per_token_weights_differ(self):
        rng = np.random.default_rng(7)
        ffn = PerTokenFFN(3, 4, 8, rng, np.float64)
        x = np.tile(rng.standard_normal((1, 1, 4)), (1, 3, 1))
        out = ffn(Tensor(x)).data
        assert not np.allclose(out[0, 0], out[0, 1])


class TestPrediction:
    def test_zero_weights_give_half(self):
        head = PredictionHead(6, (4,), np.random.default_rng(0), np.float64)
        for p in head.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(predict(Tensor(np.ones((3, 2, 3))), head).data, 0.5)

    def test_range(self):
        rng = np.random.default_rng(8)
        head = PredictionHead(6, (4,), rng, np.float64)
        y = head(Tensor(10 * rng.standard_normal((50, 2, 3)))).data
        assert np.all((y > 0) & (y < 1))

    def test_gradient(self):
        rng = np.random.default_rng(9)
        head = PredictionHead(6, (5, 3), rng, np.float64)
        assert max(check_op(lambda x: head(x), [rng.standard_normal((4, 2, 3))])) <= 1e-4


def test_token_permutation_consistency():
    """Permuting contextual tokens with their per-token weights and head slots leaves the output unchanged."""
    rng = np.random.default_rng(10)
    t, d = 6, 4
    block = Block(t, d, 2, 2, rng, np.float64)
    head = PredictionHead(t * d, (5,), rng, np.float64)
    x = rng.standard_normal((3, t, d))
    mask = np.ones((3, t), bool)
    mask[0, 1] = False
    base = head(block(Tensor(x), mask)).data

    perm = np.array([0, 1, 2, 5, 3, 4])  # core/gid slots fixed, contextual tokens rotated
    for p in (block.ffn.w1, block.ffn.b1, block.ffn.w2, block.ffn.b2):
        p.data[...] = p.data[perm]
    w = head.layers[0].weight
    w.data[...] = w.data.reshape(t, d, -1)[perm].reshape(t * d, -1)
    moved = head(block(Tensor(x[:, perm]), mask[:, perm])).data
    np.testing.assert_allclose(moved, base, rtol=1e-12, atol=1e-14)
