"""RNN transducer negative log-likelihood and greedy decoding.

Lattice convention: ``log_probs[t, u, k]`` is the log posterior of symbol
``k`` at frame ``t`` after ``u`` labels have been emitted.  Index
``BLANK = 0`` is the blank symbol; real labels are ``1..V``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .autograd import Tensor, make_node
from .errors import DimensionError, LabelError

BLANK = 0
NEG_INF = -np.inf


@dataclass
class RnntLattice:
    log_probs: np.ndarray  # [T, U+1, V+1]
    labels: np.ndarray  # [U]
    alpha: np.ndarray  # [T, U+1]
    blank_index: int = BLANK

    def check_normalized(self, tol: float = 1e-9) -> bool:
        lse = np.logaddexp.reduce(self.log_probs, axis=-1)
        return bool(np.all(np.abs(lse) <= tol))

    @property
    def log_likelihood(self) -> float:
        T, U1 = self.alpha.shape
        return float(self.alpha[T - 1, U1 - 1] + self.log_probs[T - 1, U1 - 1, self.blank_index])


def _validate_labels(labels: np.ndarray, vocab: int, blank: int) -> None:
    if labels.size == 0:
        return
    if labels.min() < 0 or labels.max() >= vocab:
        raise LabelError(f"label outside vocabulary [0, {vocab})")
    if np.any(labels == blank):
        raise LabelError("labels must not contain the blank index")


def _split(log_probs: np.ndarray, labels: np.ndarray, blank: int):
    """Blank and next-label emission log-probs: [B,T,U+1] and [B,T,U]."""
    lp_blank = log_probs[..., blank]
    B, T, U1, _ = log_probs.shape
    U = U1 - 1
    idx = np.broadcast_to(labels[:, None, :, None], (B, T, U, 1))
    lp_label = np.take_along_axis(log_probs[:, :, :U, :], idx, axis=-1)[..., 0]
    return lp_blank, lp_label


def forward_variables(lp_blank: np.ndarray, lp_label: np.ndarray) -> np.ndarray:
    """alpha[b, t, u]: log-prob of reaching node (t, u) before emitting there."""
    B, T, U1 = lp_blank.shape
    alpha = np.full((B, T, U1), NEG_INF)
    alpha[:, 0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            from_t = alpha[:, t - 1, u] + lp_blank[:, t - 1, u] if t else NEG_INF
            from_u = alpha[:, t, u - 1] + lp_label[:, t, u - 1] if u else NEG_INF
            alpha[:, t, u] = np.logaddexp(from_t, from_u)
    return alpha


def backward_variables(
    lp_blank: np.ndarray, lp_label: np.ndarray, t_lens: np.ndarray, u_lens: np.ndarray
) -> np.ndarray:
    """beta[b, t, u]: log-prob of finishing from node (t, u), final blank included."""
    B, T, U1 = lp_blank.shape
    beta = np.full((B, T, U1), NEG_INF)
    t_last = t_lens - 1
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            down = beta[:, t + 1, u] + lp_blank[:, t, u] if t + 1 < T else NEG_INF
            right = beta[:, t, u + 1] + lp_label[:, t, u] if u + 1 < U1 else NEG_INF
            val = np.logaddexp(down, right)
            val = np.where((t == t_last) & (u == u_lens), lp_blank[:, t, u], val)
            beta[:, t, u] = np.where((t <= t_last) & (u <= u_lens), val, NEG_INF)
    return beta


def rnnt_loss_batch(
    log_probs: Tensor,
    labels,
    t_lens=None,
    u_lens=None,
    blank: int = BLANK,
) -> Tensor:
    """Per-utterance ``-log P(y | x)`` for a padded batch.

    ``log_probs`` is ``[B, T, U+1, V+1]`` (already log-normalized),
    ``labels`` is ``[B, U]`` padded with any valid label, and the optional
    length vectors give each utterance's true ``T`` and ``U``.  Returns a
    ``[B]`` tensor.  The gradient is computed exactly from the forward and
    backward lattice variables.
    """
    lp = log_probs.data
    if lp.ndim != 4:
        raise DimensionError(f"log_probs must be [B,T,U+1,V+1], got {lp.shape}")
    B, T, U1, V1 = lp.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(B, U1 - 1)
    t_lens = np.full(B, T) if t_lens is None else np.asarray(t_lens, dtype=np.int64)
    u_lens = np.full(B, U1 - 1) if u_lens is None else np.asarray(u_lens, dtype=np.int64)
    if T < 1 or np.any(t_lens < 1) or np.any(t_lens > T) or np.any(u_lens < 0) or np.any(u_lens > U1 - 1):
        raise DimensionError("sequence lengths inconsistent with the lattice")
    for b in range(B):
        _validate_labels(labels[b, : u_lens[b]], V1, blank)
    # padded label slots only need to be in range
    labels = np.where(np.arange(U1 - 1)[None, :] < u_lens[:, None], labels, (blank + 1) % V1)

    lp_blank, lp_label = _split(lp, labels, blank)
    alpha = forward_variables(lp_blank, lp_label)
    rows = np.arange(B)
    ll = alpha[rows, t_lens - 1, u_lens] + lp_blank[rows, t_lens - 1, u_lens]
    loss = -ll

    def backward(g):
        beta = backward_variables(lp_blank, lp_label, t_lens, u_lens)
        nxt_t = np.full((B, T, U1), NEG_INF)
        nxt_t[:, :-1, :] = beta[:, 1:, :]
        nxt_t[rows, t_lens - 1, u_lens] = 0.0
        scale = -g[:, None, None]
        g_blank = scale * np.exp(alpha + lp_blank + nxt_t - ll[:, None, None])
        grad = np.zeros_like(lp)
        grad[..., blank] = g_blank
        if U1 > 1:
            g_label = scale * np.exp(alpha[:, :, :-1] + lp_label + beta[:, :, 1:] - ll[:, None, None])
            idx = np.broadcast_to(labels[:, None, :, None], (B, T, U1 - 1, 1))
            sub = grad[:, :, :-1, :]
            np.put_along_axis(sub, idx, np.take_along_axis(sub, idx, axis=-1) + g_label[..., None], axis=-1)
        return (grad,)

    return make_node(loss, (log_probs,), backward)


def rnnt_loss(log_probs: Tensor, labels, blank: int = BLANK) -> Tensor:
    """Scalar ``-log P(y | x)`` for one ``[T, U+1, V+1]`` lattice."""
    if log_probs.ndim != 3:
        raise DimensionError(f"log_probs must be [T,U+1,V+1], got {log_probs.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != log_probs.shape[1] - 1:
        raise DimensionError(f"{labels.size} labels but lattice has U+1={log_probs.shape[1]}")
    _validate_labels(labels, log_probs.shape[2], blank)
    batched = log_probs.reshape((1,) + log_probs.shape)
    return rnnt_loss_batch(batched, labels[None, :], blank=blank).reshape(())


def lattice(log_probs: np.ndarray, labels, blank: int = BLANK) -> RnntLattice:
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _validate_labels(labels, lp.shape[-1], blank)
    lp_blank, lp_label = _split(lp[None], labels[None], blank)
    alpha = forward_variables(lp_blank, lp_label)[0]
    return RnntLattice(lp, labels, alpha, blank)


# -- greedy decoding ---------------------------------------------------------


class Predictor(Protocol):
    def initial_state(self, batch: int): ...

    def step(self, labels: np.ndarray, state) -> tuple[np.ndarray, object]: ...


def greedy_decode_batch(
    encoder_out: np.ndarray,
    lengths,
    predictor: Predictor,
    joiner: Callable[[np.ndarray, np.ndarray], np.ndarray],
    max_symbols_per_frame: int = 3,
    blank: int = BLANK,
) -> list[list[int]]:
    """Standard RNN-T greedy search over a padded batch ``[B, T, D]``.

    ``predictor.step(labels, state)`` advances the label history by one
    symbol per batch row and returns ``(output [B, P], new_state)``;
    ``joiner(h_enc [B, D], h_pred [B, P])`` returns logits ``[B, V+1]``.
    """
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    B, T, _ = encoder_out.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    hyps: list[list[int]] = [[] for _ in range(B)]
    state = predictor.initial_state(B)
    h_pred, state = predictor.step(np.full(B, blank, dtype=np.int64), state)
    for t in range(T):
        active = lengths > t
        for _ in range(max_symbols_per_frame):
            if not active.any():
                break
            logits = joiner(encoder_out[:, t, :], h_pred)
            best = logits.argmax(axis=-1)
            emit = active & (best != blank)
            if not emit.any():
                break
            for b in np.flatnonzero(emit):
                hyps[b].append(int(best[b]))
            new_pred, new_state = predictor.step(np.where(emit, best, blank), state)
            h_pred = np.where(emit[:, None], new_pred, h_pred)
            state = _select_state(emit, new_state, state)
            active = emit
    return hyps


def _select_state(emit: np.ndarray, new, old):
    if isinstance(new, tuple):
        return tuple(_select_state(emit, n, o) for n, o in zip(new, old))
    if new is None:
        return None
    mask = emit.reshape((-1,) + (1,) * (np.ndim(new) - 1))
    return np.where(mask, new, old)


def greedy_decode(
    encoder_out: np.ndarray,
    predictor: Predictor,
    joiner: Callable[[np.ndarray, np.ndarray], np.ndarray],
    max_symbols_per_frame: int = 3,
    blank: int = BLANK,
) -> list[int]:
    """Greedy search for one utterance ``[T, D]``."""
    enc = np.asarray(encoder_out, dtype=np.float64)
    return greedy_decode_batch(enc[None], [enc.shape[0]], predictor, joiner, max_symbols_per_frame, blank)[0]
