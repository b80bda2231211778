import math

import numpy as np
import pytest

from oracles import brute_force_rnnt_nll, log_softmax_np
from supernet_rnnt import functional as F
from supernet_rnnt.autograd import Tensor, parameter
from supernet_rnnt.errors import DimensionError, LabelError
from supernet_rnnt.gradcheck import grad_check
from supernet_rnnt.rnnt import greedy_decode, lattice, rnnt_loss, rnnt_loss_batch


def random_lattice(rng, T, U, V):
    return log_softmax_np(rng.normal(size=(T, U + 1, V + 1)) * 2.0)


class TestLossExamples:
    def test_single_blank(self):
        lp = np.log(np.full((1, 1, 2), 0.5))
        assert rnnt_loss(Tensor(lp), []).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_single_label(self):
        lp = np.log(np.full((1, 2, 2), 0.5))
        assert rnnt_loss(Tensor(lp), [1]).item() == pytest.approx(math.log(4), abs=1e-15)

    @pytest.mark.parametrize("T", range(1, 5))
    @pytest.mark.parametrize("U", range(0, 4))
    @pytest.mark.parametrize("V", range(1, 4))
    def test_matches_enumeration(self, T, U, V):
        rng = np.random.default_rng([T, U, V])
        for _ in range(5):
            lp = random_lattice(rng, T, U, V)
            labels = rng.integers(1, V + 1, size=U)
            dp = rnnt_loss(Tensor(lp), labels).item()
            assert abs(dp - brute_force_rnnt_nll(lp, labels)) <= 1e-10

    def test_lattice_alpha_origin(self):
        lat = lattice(random_lattice(np.random.default_rng(0), 3, 2, 3), [1, 2])
        assert lat.alpha[0, 0] == 0.0
        assert lat.check_normalized()
        assert -lat.log_likelihood == pytest.approx(brute_force_rnnt_nll(lat.log_probs, [1, 2]), abs=1e-12)


class TestLossProperties:
    def test_gradient(self):
        rng = np.random.default_rng(1)
        z = parameter(rng.uniform(-1, 1, (3, 3, 4)))
        assert grad_check(lambda: rnnt_loss(F.log_softmax(z), [3, 1]), [z]) <= 1e-5

    def test_impossible_label_increases_loss(self):
        rng = np.random.default_rng(2)
        T, V = 4, 3
        z = rng.normal(size=(T, 3, V + 1))
        z[..., 3] = -30.0
        lp2 = log_softmax_np(z)
        lp1 = lp2[:, :2, :]
        assert rnnt_loss(Tensor(lp2), [1, 3]).item() > rnnt_loss(Tensor(lp1), [1]).item()

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        lp = random_lattice(rng, 4, 3, 3)
        labels = np.array([1, 3, 2])
        perm = np.array([0, 2, 3, 1])  # blank fixed, labels permuted
        lp_p = np.empty_like(lp)
        lp_p[..., perm] = lp
        a = rnnt_loss(Tensor(lp), labels).item()
        b = rnnt_loss(Tensor(lp_p), perm[labels]).item()
        assert a == pytest.approx(b, abs=1e-13)

    def test_batch_with_padding_matches_singles(self):
        rng = np.random.default_rng(4)
        V = 3
        lens = [(4, 2), (2, 1), (3, 0)]
        full = random_lattice(rng, 4, 2, V)[None].repeat(3, axis=0)
        labels = np.ones((3, 2), dtype=np.int64)
        singles = []
        for b, (T, U) in enumerate(lens):
            lp = random_lattice(rng, T, U, V)
            full[b, :T, : U + 1] = lp
            labs = rng.integers(1, V + 1, size=U)
            labels[b, :U] = labs
            singles.append(brute_force_rnnt_nll(lp, labs))
        out = rnnt_loss_batch(Tensor(full), labels, [T for T, _ in lens], [U for _, U in lens]).data
        np.testing.assert_allclose(out, singles, rtol=0, atol=1e-12)

    def test_blank_label_rejected(self):
        with pytest.raises(LabelError):
            rnnt_loss(Tensor(random_lattice(np.random.default_rng(0), 2, 1, 2)), [0])

    def test_out_of_vocab(self):
        with pytest.raises(LabelError):
            rnnt_loss(Tensor(random_lattice(np.random.default_rng(0), 2, 1, 2)), [3])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rnnt_loss(Tensor(random_lattice(np.random.default_rng(0), 2, 1, 2)), [1, 2])


class ScriptedPredictor:
    """State counts emitted labels; output is a one-hot of that count."""

    def initial_state(self, batch):
        return np.full(batch, -1)

    def step(self, labels, state):
        state = state + 1
        return np.eye(8)[np.minimum(state, 7)], state


class TestGreedy:
    def test_always_blank(self):
        joiner = lambda e, p: np.tile([5.0, 0.0, 0.0], (e.shape[0], 1))  # noqa: E731
        assert greedy_decode(np.zeros((6, 2)), ScriptedPredictor(), joiner) == []

    def test_scripted_teacher(self):
        script = [1, 2]  # emit "a" then "b" at the first frame, then blanks

        def joiner(h_enc, h_pred):
            count = h_pred.argmax(axis=1)
            logits = np.zeros((h_enc.shape[0], 3))
            for b, c in enumerate(count):
                logits[b, script[c] if c < len(script) else 0] = 1.0
            return logits

        assert greedy_decode(np.zeros((4, 2)), ScriptedPredictor(), joiner) == [1, 2]

    @pytest.mark.parametrize("cap", [1, 2, 3])
    def test_length_cap(self, cap):
        joiner = lambda e, p: np.tile([0.0, 1.0], (e.shape[0], 1))  # noqa: E731
        out = greedy_decode(np.zeros((5, 2)), ScriptedPredictor(), joiner, cap)
        assert len(out) == 5 * cap

    def test_invalid_cap(self):
        with pytest.raises(ValueError):
            greedy_decode(np.zeros((2, 2)), ScriptedPredictor(), lambda e, p: np.zeros((1, 2)), 0)
