import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from supernet_rnnt.autograd import parameter
from supernet_rnnt.errors import DimensionError, FrozenMaskError, ScheduleError
from supernet_rnnt.sparsity import (
    BlockMask,
    PruneSchedule,
    apply_mask,
    block_norms,
    block_scores,
    group_lasso_decay,
    group_lasso_lambda,
    kept_count,
    penalty_value,
    sparsity_after,
    update_mask,
)

ROOT2 = math.sqrt(2.0)


def two_block_fixture():
    """8x2 matrix: column 0 all 0.5 (norm sqrt 2), column 1 all zero."""
    W = np.zeros((8, 2))
    W[:, 0] = 0.5
    return W


def column_weights(scores):
    """8xN matrix whose block i (one column) has L1 score ``scores[i]``."""
    return np.tile(np.asarray(scores, dtype=float) / 8.0, (8, 1))


class TestSparsityAfter:
    @pytest.mark.parametrize(
        "p,n,expected", [(0.2, 5, 0.67232), (0.2, 9, 0.865782272), (0.2, 0, 0.0)]
    )
    def test_values(self, p, n, expected):
        assert abs(sparsity_after(p, n) - expected) <= 1e-12

    def test_two_decimal_rounding(self):
        assert round(sparsity_after(0.2, 5), 2) == 0.67
        assert round(sparsity_after(0.2, 9), 2) == 0.87

    def test_schedule_target_matches_closed_form(self):
        s = PruneSchedule(t0=0, delta_t=1, p=0.3, n=4)
        assert abs(s.target - (1 - 0.7**4)) <= 1e-12

    @pytest.mark.parametrize("kw", [dict(t0=-1), dict(delta_t=0), dict(p=0.0), dict(p=1.0)])
    def test_invalid_schedule(self, kw):
        with pytest.raises(ScheduleError):
            PruneSchedule(**kw)


class TestBlockScores:
    def test_zero_block(self):
        assert block_scores(np.zeros((8, 1)))[0, 0] == 0.0

    def test_half_entries(self):
        assert block_scores(np.full((8, 1), 0.5))[0, 0] == 4.0

    def test_scale_linearity(self):
        W = np.empty((8, 2))
        W[:, 0] = 0.1 * np.array([1, -1] * 4)
        W[:, 1] = 0.2 * np.array([-1, 1] * 4)
        s = block_scores(W).reshape(-1)
        assert s[1] == 2 * s[0]

    def test_orientation_is_output_major(self):
        W = np.zeros((16, 3))
        W[8:16, 2] = 1.0
        s = block_scores(W)
        assert s.shape == (2, 3)
        assert s[1, 2] == 8.0 and s.sum() == 8.0

    def test_indivisible_rows(self):
        with pytest.raises(DimensionError):
            block_scores(np.ones((7, 2)))


class TestUpdateMask:
    def test_full_target_is_noop(self):
        m = BlockMask.dense("w", (8, 10))
        new = update_mask(column_weights(range(1, 11)), m, 1.0)
        assert np.array_equal(new.bits, m.bits)

    def test_prunes_lowest_scores(self):
        m = BlockMask.dense("w", (8, 10))
        new = update_mask(column_weights(range(1, 11)), m, 0.8)
        assert new.bits.reshape(-1).tolist() == [False, False] + [True] * 8

    def test_five_rounds_on_hundred_blocks(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(80, 10))
        m = BlockMask.dense("w", W.shape)
        for k in range(1, 6):
            m = update_mask(W, m, 0.8**k)
            assert m.alive_blocks == math.ceil(0.8**k * 100 - 1e-9)
        assert m.alive_blocks == 33

    def test_ties_prune_lower_index_first(self):
        m = BlockMask.dense("w", (8, 4))
        new = update_mask(np.ones((8, 4)), m, 0.5)
        assert new.bits.reshape(-1).tolist() == [False, False, True, True]

    def test_pruned_blocks_stay_pruned(self):
        W = column_weights([5, 1, 4, 3, 2])
        m = update_mask(W, BlockMask.dense("w", W.shape), 0.8)
        W2 = column_weights([5, 100, 4, 3, 2])  # the pruned block grows
        m2 = update_mask(W2, m, 0.6)
        assert not m2.bits[0, 1]
        assert m2.alive_blocks == 3

    def test_input_mask_unchanged(self):
        m = BlockMask.dense("w", (8, 5))
        update_mask(column_weights([1, 2, 3, 4, 5]), m, 0.6)
        assert m.alive_blocks == 5

    def test_frozen(self):
        m = BlockMask.dense("w", (8, 2))
        m.freeze()
        with pytest.raises(FrozenMaskError):
            update_mask(np.ones((8, 2)), m, 0.5)

    def test_target_above_current(self):
        m = update_mask(column_weights([1, 2, 3, 4]), BlockMask.dense("w", (8, 4)), 0.5)
        with pytest.raises(ScheduleError):
            update_mask(column_weights([1, 2, 3, 4]), m, 0.9)

    def test_kept_count_tolerance(self):
        assert kept_count(0.8**2, 100) == 64
        assert kept_count(0.8**5, 100) == 33

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 12), st.floats(0.05, 0.5), st.integers(1, 6), st.integers(0, 2**31))
    def test_schedule_exactness_and_monotonicity(self, gr, gc, p, n, seed):
        W = np.random.default_rng(seed).normal(size=(8 * gr, gc))
        m = BlockMask.dense("w", W.shape)
        total = m.total_blocks
        for k in range(1, n + 1):
            new = update_mask(W, m, (1 - p) ** k)
            assert not np.any(new.bits & ~m.bits)
            assert new.alive_blocks == kept_count((1 - p) ** k, total)
            m = new


class TestApplyMask:
    def test_all_true(self):
        W = parameter(np.random.default_rng(0).normal(size=(8, 3)))
        out = apply_mask(W, BlockMask.dense("w", (8, 3)))
        assert np.array_equal(out.data, W.data)

    def test_all_false(self):
        W = parameter(np.ones((8, 3)))
        m = BlockMask.dense("w", (8, 3))
        m.bits[:] = False
        out = apply_mask(W, m)
        assert np.all(out.data == 0)
        out.sum().backward()
        assert np.all(W.grad == 0)

    def test_half_pruned_gradients(self):
        rng = np.random.default_rng(1)
        W = parameter(rng.normal(size=(16, 3)))
        x = rng.normal(size=3)
        m = BlockMask.dense("w", (16, 3))
        m.bits[0, :] = False  # rows 0..7 pruned
        loss = (apply_mask(W, m) @ parameter(x).reshape(3, 1)).sum()
        loss.backward()
        assert np.all(W.grad[:8] == 0.0)
        assert not np.any(np.signbit(W.grad[:8]))
        np.testing.assert_array_equal(W.grad[8:], np.tile(x, (8, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            apply_mask(parameter(np.ones((8, 3))), BlockMask.dense("w", (8, 4)))


class TestGroupLasso:
    def test_lambda_zero_weights(self):
        assert group_lasso_lambda(np.zeros((8, 4)), 1.0) == 0.0

    def test_lambda_two_blocks(self):
        assert abs(group_lasso_lambda(two_block_fixture(), 1.0) - 0.70711) < 1e-5

    @pytest.mark.parametrize("c", [-3.0, 0.5, 2.0])
    def test_lambda_homogeneous(self, c):
        W = np.random.default_rng(2).normal(size=(16, 5))
        assert group_lasso_lambda(c * W, 0.7) == pytest.approx(abs(c) * group_lasso_lambda(W, 0.7), rel=1e-14)

    def test_decay_zero_block_unchanged(self):
        W = two_block_fixture()
        group_lasso_decay(W, 0.70711, 1.0)
        assert np.all(W[:, 1] == 0.0)

    def test_decay_hand_fixture(self):
        W = two_block_fixture()
        lam_i = ROOT2 / 2.0
        group_lasso_decay(W, lam_i, 1.0)
        np.testing.assert_allclose(W[:, 0], 0.25, rtol=0, atol=1e-15)

    def test_decay_hand_fixture_rounded_lambda(self):
        W = two_block_fixture()
        group_lasso_decay(W, 0.70711, 1.0)
        np.testing.assert_allclose(W[:, 0], 0.5 - 0.70711 / ROOT2 * 0.5, rtol=0, atol=1e-15)
        assert abs(W[0, 0] - 0.25) < 1e-5

    def test_decay_is_in_place_and_returns_weights(self):
        W = two_block_fixture()
        assert group_lasso_decay(W, 0.1, 0.1) is W

    def test_decay_monotone_to_zero(self):
        W = np.random.default_rng(3).normal(size=(16, 4))
        prev = block_norms(W)
        for _ in range(200):
            group_lasso_decay(W, 0.5, 0.05)
            now = block_norms(W)
            assert np.all(now <= prev)
            prev = now
        assert prev.max() == 0.0

    def test_decay_never_flips_sign(self):
        W = np.random.default_rng(4).normal(size=(8, 6))
        signs = np.sign(W)
        group_lasso_decay(W, 100.0, 1.0)  # factor clamps at zero
        assert np.all(W == 0.0)
        W = np.random.default_rng(4).normal(size=(8, 6))
        group_lasso_decay(W, 0.3, 0.5)
        assert np.all((np.sign(W) == signs) | (W == 0))

    def test_decay_skip_grid(self):
        W = np.ones((8, 2))
        skip = np.array([[True, False]])
        group_lasso_decay(W, 1.0, 0.1, skip)
        assert np.all(W[:, 0] == 1.0) and np.all(W[:, 1] < 1.0)

    def test_decay_requires_positive_lr(self):
        with pytest.raises(ValueError):
            group_lasso_decay(np.ones((8, 1)), 1.0, 0.0)

    def test_penalty_values(self):
        assert penalty_value([np.zeros((8, 3))], 1.0) == 0.0
        assert penalty_value([two_block_fixture()], 1.0) == pytest.approx(1.0, abs=1e-12)
        W = np.random.default_rng(5).normal(size=(8, 3))
        assert penalty_value([W], 2.0) == pytest.approx(2 * penalty_value([W], 1.0), rel=1e-14)


class TestBlockMaskFile:
    def test_round_trip(self, tmp_path):
        m = BlockMask.dense("enc.0.attn.wq", (24, 13))
        m.bits[1, 3::2] = False
        m.freeze()
        path = tmp_path / "m.mask"
        m.save(path)
        back = BlockMask.load(path)
        assert back.layer == m.layer and back.frozen
        assert np.array_equal(back.bits, m.bits)

    def test_header_and_bit_order(self):
        m = BlockMask.dense("w", (8, 9))
        m.bits[0, :] = [True, False, False, False, False, False, False, False, True]
        blob = m.to_bytes()
        header, payload = blob.split(b"\n", 1)
        h = json.loads(header)
        assert h["block_shape"] == [8, 1]
        assert (h["grid_rows"], h["grid_cols"]) == (1, 9)
        assert h["sparsity"] == pytest.approx(7 / 9)
        assert payload == bytes([0b00000001, 0b00000001])

    def test_mask_requires_divisible_rows(self):
        with pytest.raises(DimensionError):
            BlockMask.dense("w", (12, 2))
