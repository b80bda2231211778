import numpy as np
import pytest

from supernet_rnnt.autograd import Tensor
from supernet_rnnt.chunking import ModeSampler, segment
from supernet_rnnt.data import Batch
from supernet_rnnt.errors import DimensionError, LabelError
from supernet_rnnt.gradcheck import grad_check
from supernet_rnnt.model import EncoderConfig, ModelConfig, RnntModel, stack_frames
from supernet_rnnt.sparsity import update_mask

TINY = ModelConfig(
    EncoderConfig(num_layers=2, embed_dim=8, ffn_dim=16, num_heads=2, input_dim=2, feature_stride=2, pos_clip=4),
    vocab_size=3,
    pred_embed_dim=4,
    pred_dim=8,
    joint_dim=6,
)


@pytest.fixture(scope="module")
def model():
    return RnntModel(ModelConfig(), seed=3)


def stacked_input(model, T, seed=0, B=1):
    S = model.cfg.encoder.input_dim * model.cfg.encoder.feature_stride
    return np.random.default_rng(seed).normal(size=(B, T, S))


def pruned_masks(model, remaining=0.5):
    masks = model.dense_masks()
    return {n: update_mask(model.params[n].data, m, remaining) for n, m in masks.items()}


class TestEncoder:
    def test_full_context_equals_unmasked(self, model):
        x = stacked_input(model, 17)
        lay = segment(17, 1000, 20, 0)
        a = model.encode(x, [lay]).data
        b = model.encode_unmasked(x).data
        assert np.max(np.abs(a - b)) <= 1e-9

    def test_all_true_masks_equal_dense(self, model):
        x = stacked_input(model, 11)
        lay = segment(11, 3, 20, 1)
        a = model.encode(x, [lay], model.dense_masks()).data
        b = model.encode(x, [lay]).data
        assert np.array_equal(a, b)

    def test_last_frame_cannot_reach_first(self, model):
        T = 10
        x = stacked_input(model, T)
        lay = segment(T, 3, 20, 1)
        base = model.encode(x, [lay]).data
        x2 = x.copy()
        x2[0, T - 1] += 5.0
        out = model.encode(x2, [lay]).data
        assert np.array_equal(out[0, 0], base[0, 0])
        assert not np.array_equal(out[0, T - 1], base[0, T - 1])

    @pytest.mark.parametrize("C,R", [(3, 1), (2, 2), (4, 0)])
    def test_reachability_every_frame(self, model, C, R):
        T = 13
        x = stacked_input(model, T, seed=C)
        lay = segment(T, C, 20, R)
        base = model.encode(x, [lay]).data[0]
        for s in lay.segments:
            if s.right_end >= T:
                continue
            x2 = x.copy()
            x2[0, s.right_end :] += np.random.default_rng(s.right_end).normal(size=x2[0, s.right_end :].shape)
            out = model.encode(x2, [lay]).data[0]
            assert np.array_equal(out[: s.center_end], base[: s.center_end])

    def test_masked_batch_matches_sequential(self, model):
        masks = pruned_masks(model)
        for T, C, L, R in [(10, 3, 20, 1), (23, 3, 4, 1), (9, 2, 3, 2)]:
            x = stacked_input(model, T, seed=T)
            lay = segment(T, C, L, R)
            batch = model.encode(x, [lay], masks).data[0]
            seq = model.encode_sequential(x[0], lay, masks)
            assert np.max(np.abs(batch - seq)) <= 1e-9

    def test_padded_batch_matches_singles(self, model):
        sampler = ModeSampler()
        x = stacked_input(model, 9, B=2)
        lens = [9, 5]
        for mode in (sampler.streaming(), sampler.full()):
            lays = [sampler.layout(n, mode) for n in lens]
            out = model.encode(x, lays, None, lens).data
            for b, n in enumerate(lens):
                single = model.encode(x[b : b + 1, :n], [lays[b]]).data[0]
                np.testing.assert_allclose(out[b, :n], single, rtol=0, atol=1e-12)

    def test_layout_mismatch(self, model):
        with pytest.raises(DimensionError):
            model.encode(stacked_input(model, 6), [segment(7, 3, 1, 1)])


class TestPredictor:
    def test_empty_history(self, model):
        out = model.predict(np.zeros((1, 0), dtype=np.int64))
        assert out.shape == (1, 1, model.cfg.pred_dim)

    def test_pure(self, model):
        labels = np.array([[3, 1, 4]])
        assert np.array_equal(model.predict(labels).data, model.predict(labels).data)

    def test_identity_recurrence(self):
        cfg = ModelConfig(TINY.encoder, vocab_size=3, pred_embed_dim=8, pred_dim=8, joint_dim=6)
        m = RnntModel(cfg)
        p = m.params
        p["pred.embed"].data = np.eye(4, 8)
        p["pred.w_ih"].data = np.eye(8)
        p["pred.w_hh"].data = np.eye(8)
        p["pred.b_h"].data = np.zeros(8)
        p["pred.w_proj"].data = np.eye(8)
        p["pred.b_proj"].data = np.zeros(8)
        out = m.predict(np.array([[1, 2]])).data[0]
        h0 = np.tanh(np.eye(8)[0])
        h1 = np.tanh(np.eye(8)[1] + h0)
        h2 = np.tanh(np.eye(8)[2] + h1)
        np.testing.assert_allclose(out, [h0, h1, h2], rtol=0, atol=1e-15)

    def test_step_matches_full_unroll(self, model):
        labels = np.array([[2, 7, 5]])
        full = model.predict(labels).data[0]
        step = model.predictor_step()
        state = step.initial_state(1)
        outs = []
        for y in [0, 2, 7, 5]:
            o, state = step.step(np.array([y]), state)
            outs.append(o[0])
        np.testing.assert_allclose(np.array(outs), full, rtol=0, atol=1e-13)

    def test_label_out_of_range(self, model):
        with pytest.raises(LabelError):
            model.predict(np.array([[17]]))


class TestJoiner:
    def test_zero_inputs(self):
        m = RnntModel(TINY)
        z = m.join(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 8)))).data
        assert np.all(z == 0.0)

    def test_shape(self, model):
        h_enc = model.encode(stacked_input(model, 7), [segment(7, 7, 0, 0)])
        h_pred = model.predict(np.array([[1, 2, 3]]))
        assert model.join(h_enc, h_pred).shape == (1, 7, 4, model.cfg.vocab_size + 1)

    def test_identity_fixture(self):
        cfg = ModelConfig(TINY.encoder, vocab_size=7, pred_embed_dim=4, pred_dim=8, joint_dim=8)
        m = RnntModel(cfg)
        p = m.params
        p["join.w_enc"].data = np.eye(8)
        p["join.w_pred"].data = np.eye(8)
        p["join.b"].data = np.zeros(8)
        p["join.w_out"].data = np.eye(8)
        p["join.b_out"].data = np.zeros(8)
        e = np.full(8, 0.01)
        q = np.arange(8) * 0.001
        z = m.join(Tensor(e.reshape(1, 1, 8)), Tensor(q.reshape(1, 1, 8))).data[0, 0, 0]
        np.testing.assert_allclose(z, np.tanh(e + q), rtol=0, atol=1e-15)
        np.testing.assert_allclose(z, e + q, rtol=1e-3)

    def test_dimension_mismatch(self, model):
        with pytest.raises(DimensionError):
            model.join(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 1, 64))))


class TestSupernet:
    def test_weight_sharing(self):
        m = RnntModel(ModelConfig(), seed=1)
        masks = pruned_masks(m)
        x = stacked_input(m, 8)
        lay = segment(8, 3, 20, 1)
        before = m.encode(x, [lay], masks).data
        name = "enc.0.attn.wv"
        alive = masks[name].keep()
        m.params[name].data = m.params[name].data + np.where(alive, 0.1, 0.0)
        after = m.encode(x, [lay], masks).data
        assert not np.array_equal(before, after)

    def test_parameter_count_audit(self, model):
        s = 0.67232
        masks = {n: update_mask(model.params[n].data, m, 1 - s) for n, m in model.dense_masks().items()}
        for name, mask in masks.items():
            W = model.params[name].data
            nonzero = np.count_nonzero(np.where(mask.keep(), W, 0.0))
            assert abs(nonzero - (1 - s) * W.size) <= 8
        assert set(masks) == set(model.prunable)

    def test_prunable_dims_divisible(self, model):
        for name in model.prunable:
            assert model.params[name].shape[0] % 8 == 0

    def test_invalid_config(self):
        with pytest.raises(DimensionError):
            EncoderConfig(embed_dim=60, num_heads=8)


def tiny_batch(seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(2, 8, 2))
    return Batch(feats, np.array([8, 6]), np.array([[1, 3], [2, 2]]), np.array([2, 1]))


@pytest.mark.parametrize("streaming", [False, True])
def test_full_model_loss_gradient(streaming):
    m = RnntModel(TINY, seed=5)
    for t in m.params.values():  # move off the symmetric zero/one init
        t.data = t.data + np.random.default_rng(9).uniform(-0.1, 0.1, t.shape)
    batch = tiny_batch()
    sampler = ModeSampler(tau0=2, tau1=100, left=2, right=1)
    mode = sampler.streaming() if streaming else sampler.full()
    _, t_lens = stack_frames(batch.feats, batch.frame_lens, 2)
    lays = [sampler.layout(int(n), mode) for n in t_lens]
    masks = pruned_masks(m) if streaming else None
    params = list(m.params.values())
    err = grad_check(lambda: m.rnnt_losses(batch, lays, masks).mean(), params)
    assert err <= 1e-5
