import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdnet import tensor as T
from cdnet.core_behaviors import INVALID_SCORE, ScoreVector, score_sequence, ste_gather, top_k_select
from cdnet.gradcheck import numerical_grad
from cdnet.tensor import Tensor


def random_scores(rng, batch, length, k):
    valid = rng.integers(0, length + 1, batch)
    mask = np.arange(length)[None, :] < valid[:, None]
    a = np.where(mask, rng.random((batch, length)), INVALID_SCORE)
    return a, mask


class TestScoreSequence:
    def test_reference_angles(self):
        f = np.array([[1.0, 2.0, 0.0]])
        s = np.stack([f[0], np.array([-2.0, 1.0, 5.0]), -f[0]])[None]
        sv = score_sequence(Tensor(f), Tensor(s), np.ones((1, 3), bool))
        np.testing.assert_allclose(sv.scores.data[0], [1.0, 0.5, 0.0], atol=1e-15)

    def test_invalid_positions(self):
        rng = np.random.default_rng(0)
        sv = score_sequence(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((1, 3, 4))),
                            np.array([[True, False, True]]))
        assert sv.scores.data[0, 1] == INVALID_SCORE
        assert 0 <= sv.scores.data[0, 0] <= 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        f, s = rng.standard_normal((2, 5)), rng.standard_normal((2, 6, 5))
        mask = np.ones((2, 6), bool)
        a = score_sequence(Tensor(f), Tensor(s), mask).scores.data
        b = score_sequence(Tensor(c * f), Tensor(s), mask).scores.data
        np.testing.assert_allclose(a, b, atol=1e-12)
        ranked = np.sort(a, axis=1)
        if np.all(ranked[:, -3] - ranked[:, -4] > 1e-9):
            np.testing.assert_array_equal(top_k_select(a, 3).indices, top_k_select(b, 3).indices)


class TestTopK:
    def test_two_largest(self):
        sel = top_k_select(np.array([0.9, 0.1, 0.8, 0.3]), 2)
        assert sel.indices.tolist() == [0, 2]
        np.testing.assert_array_equal(sel.selected, [1, 0, 1, 0])

    def test_tie_goes_to_smaller_index(self):
        assert top_k_select(np.array([0.5, 0.5, 0.2]), 1).indices.tolist() == [0]

    def test_k_exceeds_valid_len(self):
        mask = np.array([True, True, True, False, False])
        sel = top_k_select(np.array([0.3, 0.9, 0.1, -1, -1]), 4, mask)
        assert sel.k_eff == 3
        assert sel.indices[sel.core_mask].tolist() == [0, 1, 2]
        assert sel.core_mask.tolist() == [True, True, True, False]

    def test_empty_sequence(self):
        sel = top_k_select(np.full((1, 4), INVALID_SCORE), 2, np.zeros((1, 4), bool))
        assert sel.k_eff[0] == 0 and not sel.core_mask.any() and not sel.selected.any()

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            top_k_select(np.ones(3), 0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 9))
    def test_selection_optimality(self, seed, k):
        rng = np.random.default_rng(seed)
        a, mask = random_scores(rng, 4, 8, k)
        a = np.round(a, 1)  # force ties
        sel = top_k_select(a, k, mask)
        for row in range(4):
            chosen = sel.indices[row][sel.core_mask[row]]
            assert np.all(np.diff(chosen) > 0)
            rest = np.setdiff1d(np.flatnonzero(mask[row]), chosen)
            assert len(chosen) == min(k, mask[row].sum())
            if len(chosen) and len(rest):
                lo = a[row, chosen].min()
                assert lo >= a[row, rest].max()
                # among equal scores at the cut, smaller positions win
                tied_out = rest[a[row, rest] == lo]
                tied_in = chosen[a[row, chosen] == lo]
                if len(tied_out):
                    assert tied_in.max() < tied_out.min()


class TestSteGather:
    def test_forward_equals_hard_gather_bitwise(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = Tensor(rng.standard_normal((3, 7, 4)).astype(np.float32))
            a, mask = random_scores(rng, 3, 7, 3)
            sv = ScoreVector(Tensor(a.astype(np.float32)), mask)
            sel = top_k_select(sv, 3)
            out = ste_gather(s, sv, sel).data
            hard = T.gather_rows(s, sel.indices).data * sel.core_mask[..., None]
            assert out.tobytes() == hard.astype(np.float32).tobytes()

    def test_gradient_matches_frozen_relaxation(self):
        rng = np.random.default_rng(2)
        s = Tensor(rng.standard_normal((2, 6, 3)), requires_grad=True)
        a, mask = random_scores(rng, 2, 6, 2)
        mask[:, :3] = True
        a[mask] = rng.random(mask.sum())
        scores = Tensor(a, requires_grad=True)
        sv = ScoreVector(scores, mask)
        sel = top_k_select(sv, 2)
        w = rng.standard_normal((2, 2, 3))
        T.backward(T.sum(T.mul(ste_gather(s, sv, sel), w)))
        offset = sel.selected - a

        def relaxed():
            with T.no_grad():
                return float((ste_gather(s, sv, sel, frozen_offset=offset).data * w).sum())

        np.testing.assert_allclose(scores.grad, numerical_grad(relaxed, scores.data), atol=1e-9)
        np.testing.assert_allclose(s.grad, numerical_grad(relaxed, s.data), atol=1e-9)
        assert np.all(scores.grad[sel.selected == 0] == 0.0)

    def test_masked_slots_are_zero(self):
        s = Tensor(np.ones((1, 4, 2)))
        sv = ScoreVector(Tensor(np.array([[0.3, 0.6, -1.0, -1.0]])), np.array([[True, True, False, False]]))
        out = ste_gather(s, sv, top_k_select(sv, 3)).data
        np.testing.assert_array_equal(out[0, 2], 0.0)

    def test_score_path_reaches_target_tables(self):
        rng = np.random.default_rng(3)
        table = T.Parameter(rng.standard_normal((6, 4)), "emb")
        f = T.embedding_lookup(table, [[0]])
        s = T.embedding_lookup(table, [[1, 2, 3, 4]])
        f = T.reshape(f, (1, 4))
        sv = score_sequence(f, s, np.ones((1, 4), bool))
        core = ste_gather(s, sv, top_k_select(sv, 2))
        T.backward(T.sum(T.mul(core, rng.standard_normal(core.shape))))
        assert np.any(table.grad[0] != 0)
        assert np.any(table.grad[1:5] != 0)
