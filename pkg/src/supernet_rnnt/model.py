"""Dual-mode RNN-T network: chunked-attention encoder, recurrent predictor, joiner.

One parameter dictionary serves both operating points.  Streaming passes
read prunable matrices through their :class:`BlockMask`; full-context passes
read the raw weights.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import functional as F
from .autograd import Tensor, concat, no_grad, parameter, stack
from .chunking import ContextPlan, SegmentLayout, context_plan, segment
from .errors import DimensionError, LabelError
from .rnnt import BLANK, rnnt_loss_batch
from .sparsity import BlockMask, apply_mask

Masks = Mapping[str, BlockMask]


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    input_dim: int = 8
    feature_stride: int = 6
    pos_clip: int = 64

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise DimensionError("embed_dim must be divisible by num_heads")
        if self.embed_dim % 8 or self.ffn_dim % 8:
            raise DimensionError("encoder output dims must be multiples of 8")


# Full-size encoder shapes for reference; not trained here.
FULL_SIZE_PRESETS = {
    "35M": dict(num_layers=18, embed_dim=384, ffn_dim=1024, num_heads=4),
    "73M": dict(num_layers=20, embed_dim=512, ffn_dim=2048, num_heads=8),
    "181M": dict(num_layers=24, embed_dim=768, ffn_dim=3072, num_heads=8),
}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    vocab_size: int = 16
    pred_embed_dim: int = 32
    pred_dim: int = 64
    joint_dim: int = 64

    def __post_init__(self):
        if self.pred_dim % 8:
            raise DimensionError("pred_dim must be a multiple of 8")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def stack_frames(feats: np.ndarray, frame_lens, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate ``stride`` consecutive frames; trailing partial windows are dropped.

    ``feats`` is ``[B, T, F]`` → ``([B, T // stride, stride * F], lengths)``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    B, T, Fd = feats.shape
    lens = np.asarray(frame_lens, dtype=np.int64) // stride
    Tp = T // stride
    out = feats[:, : Tp * stride, :].reshape(B, Tp, stride * Fd)
    return out, lens


@lru_cache(maxsize=4096)
def _cached_plan(T: int, C: int, L: int, R: int) -> ContextPlan:
    return context_plan(segment(T, C, L, R))


def plan_for(layout: SegmentLayout) -> ContextPlan:
    return _cached_plan(layout.T, layout.C, layout.L, layout.R)


class EncoderBatchPlan:
    """Padded attention plan for a batch of utterances with their own layouts.

    Positions ``[0, T_max)`` hold the utterance frames; private look-ahead
    copies follow.  Padding rows attend only to themselves.
    """

    def __init__(self, layouts: list[SegmentLayout], T_max: int, pos_clip: int):
        plans = [plan_for(lay) for lay in layouts]
        n_copies = [len(p.source) - lay.T for p, lay in zip(plans, layouts)]
        L = T_max + max(n_copies, default=0)
        B = len(layouts)
        gather = np.zeros((B, L), dtype=np.int64)
        allow = np.zeros((B, L, L), dtype=bool)
        pos = np.zeros((B, L), dtype=np.int64)
        allow[:, np.arange(L), np.arange(L)] = True
        for b, (p, lay) in enumerate(zip(plans, layouts)):
            T = lay.T
            slot = np.concatenate([np.arange(T), T_max + np.arange(len(p.source) - T)])
            gather[b, slot] = p.source
            pos[b, slot] = p.positions
            allow[b, slot[:, None], slot[None, :]] = p.allow
            # padding rows keep self-attention only
        self.gather = gather
        self.allow = allow
        rel = pos[:, None, :] - pos[:, :, None]
        self.rel_index = np.clip(rel, -pos_clip, pos_clip) + pos_clip
        self.T_max = T_max


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class RnntModel:
    """Parameters plus the encoder / predictor / joiner forward functions."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 7919])
        e = cfg.encoder
        D, Fh, H = e.embed_dim, e.ffn_dim, e.num_heads
        S = e.input_dim * e.feature_stride
        V1 = cfg.vocab_size + 1
        P, Pe, J = cfg.pred_dim, cfg.pred_embed_dim, cfg.joint_dim
        p: dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = parameter(arr, name)

        add("frontend.w", _init(rng, (D, S), S))
        add("frontend.b", np.zeros(D))
        for i in range(e.num_layers):
            pre = f"enc.{i}."
            for n in ("wq", "wk", "wv", "wo"):
                add(pre + "attn." + n, _init(rng, (D, D), D))
                if n != "wk":  # a key bias shifts every score in a row equally
                    add(pre + "attn.b" + n[1], np.zeros(D))
            add(pre + "ffn.w1", _init(rng, (Fh, D), D))
            add(pre + "ffn.b1", np.zeros(Fh))
            add(pre + "ffn.w2", _init(rng, (D, Fh), Fh))
            add(pre + "ffn.b2", np.zeros(D))
            for ln in ("ln1", "ln2", "ln3"):
                add(pre + ln + ".g", np.ones(D))
                add(pre + ln + ".b", np.zeros(D))
            add(pre + "rel_bias", np.zeros((2 * e.pos_clip + 1, H)))
        add("pred.embed", rng.normal(0.0, 1.0, size=(V1, Pe)))
        add("pred.w_ih", _init(rng, (P, Pe), Pe))
        add("pred.w_hh", _init(rng, (P, P), P))
        add("pred.b_h", np.zeros(P))
        add("pred.w_proj", _init(rng, (P, P), P))
        add("pred.b_proj", np.zeros(P))
        add("join.w_enc", _init(rng, (J, D), D))
        add("join.w_pred", _init(rng, (J, P), P))
        add("join.b", np.zeros(J))
        add("join.w_out", _init(rng, (V1, J), J))
        add("join.b_out", np.zeros(V1))
        self.params = p

    # -- bookkeeping -------------------------------------------------------
    @property
    def encoder_prunable(self) -> list[str]:
        names = []
        for i in range(self.cfg.encoder.num_layers):
            pre = f"enc.{i}."
            names += [pre + "attn.wq", pre + "attn.wk", pre + "attn.wv", pre + "attn.wo"]
            names += [pre + "ffn.w1", pre + "ffn.w2"]
        return names

    @property
    def predictor_prunable(self) -> list[str]:
        return ["pred.w_ih", "pred.w_hh", "pred.w_proj"]

    @property
    def prunable(self) -> list[str]:
        return self.encoder_prunable + self.predictor_prunable

    def dense_masks(self) -> dict[str, BlockMask]:
        return {n: BlockMask.dense(n, self.params[n].shape) for n in self.prunable}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _w(self, name: str, masks: Masks | None) -> Tensor:
        w = self.params[name]
        if masks is not None and name in masks:
            return apply_mask(w, masks[name])
        return w

    # -- encoder ------------------------------------------------------------
    def _layer(self, x: Tensor, i: int, allow: np.ndarray, rel_index: np.ndarray, masks) -> Tensor:
        e = self.cfg.encoder
        pre = f"enc.{i}."
        p = self.params
        B, L, D = x.shape
        H, dh = e.num_heads, e.embed_dim // e.num_heads

        h = F.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(F.linear(h, self._w(pre + "attn.wq", masks), p[pre + "attn.bq"]))
        k = heads(F.linear(h, self._w(pre + "attn.wk", masks)))
        v = heads(F.linear(h, self._w(pre + "attn.wv", masks), p[pre + "attn.bv"]))
        bias = F.embedding(p[pre + "rel_bias"], rel_index).transpose(0, 3, 1, 2)
        a = F.attention(q, k, v, allow[:, None, :, :], bias)
        a = a.transpose(0, 2, 1, 3).reshape(B, L, D)
        x = x + F.linear(a, self._w(pre + "attn.wo", masks), p[pre + "attn.bo"])

        h = F.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = F.relu(F.linear(h, self._w(pre + "ffn.w1", masks), p[pre + "ffn.b1"]))
        x = x + F.linear(h, self._w(pre + "ffn.w2", masks), p[pre + "ffn.b2"])
        return F.layer_norm(x, p[pre + "ln3.g"], p[pre + "ln3.b"])

    def frontend(self, stacked) -> Tensor:
        x = stacked if isinstance(stacked, Tensor) else Tensor(stacked)
        if x.shape[-1] != self.params["frontend.w"].shape[1]:
            raise DimensionError(
                f"stacked feature dim {x.shape[-1]} != {self.params['frontend.w'].shape[1]}"
            )
        return F.linear(x, self.params["frontend.w"], self.params["frontend.b"])

    def encode(
        self,
        stacked,
        layouts: list[SegmentLayout],
        masks: Masks | None = None,
        lengths=None,
    ) -> Tensor:
        """Encoder output ``[B, T_max, D]`` for stacked features ``[B, T_max, S]``."""
        x = self.frontend(stacked)
        B, T_max, _ = x.shape
        if len(layouts) != B:
            raise DimensionError("one layout per utterance required")
        lengths = [lay.T for lay in layouts] if lengths is None else list(lengths)
        for lay, n in zip(layouts, lengths):
            if lay.T != n or n > T_max:
                raise DimensionError(f"layout covers {lay.T} frames, utterance has {n}")
        plan = EncoderBatchPlan(layouts, T_max, self.cfg.encoder.pos_clip)
        h = F.gather_time(x, plan.gather)
        for i in range(self.cfg.encoder.num_layers):
            h = self._layer(h, i, plan.allow, plan.rel_index, masks)
        return h[:, :T_max, :]

    def encode_unmasked(self, stacked) -> Tensor:
        """Encoder with attention over every frame and no allow-mask argument."""
        x = self.frontend(stacked)
        B, T, _ = x.shape
        pos = np.arange(T)
        c = self.cfg.encoder.pos_clip
        rel = np.broadcast_to(np.clip(pos[None, :] - pos[:, None], -c, c) + c, (B, T, T))
        e = self.cfg.encoder
        p = self.params
        H, dh = e.num_heads, e.embed_dim // e.num_heads
        h = x
        for i in range(e.num_layers):
            pre = f"enc.{i}."
            z = F.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(t: Tensor) -> Tensor:
                return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

            q = heads(F.linear(z, p[pre + "attn.wq"], p[pre + "attn.bq"]))
            k = heads(F.linear(z, p[pre + "attn.wk"]))
            v = heads(F.linear(z, p[pre + "attn.wv"], p[pre + "attn.bv"]))
            bias = F.embedding(p[pre + "rel_bias"], rel).transpose(0, 3, 1, 2)
            a = F.attention(q, k, v, None, bias).transpose(0, 2, 1, 3).reshape(B, T, e.embed_dim)
            h = h + F.linear(a, p[pre + "attn.wo"], p[pre + "attn.bo"])
            z = F.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            z = F.relu(F.linear(z, p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
            h = h + F.linear(z, p[pre + "ffn.w2"], p[pre + "ffn.b2"])
            h = F.layer_norm(h, p[pre + "ln3.g"], p[pre + "ln3.b"])
        return h

    def encode_sequential(self, stacked: np.ndarray, layout: SegmentLayout, masks: Masks | None = None) -> np.ndarray:
        """Segment-by-segment inference for one utterance ``[T, S]``.

        Each segment runs through the whole stack with its left context
        taken from cached per-layer states of earlier segments.
        """
        stacked = np.asarray(stacked, dtype=np.float64)
        if stacked.shape[0] != layout.T:
            raise DimensionError("layout/frame mismatch")
        n_layers = self.cfg.encoder.num_layers
        c = self.cfg.encoder.pos_clip
        with no_grad():
            x = self.frontend(stacked[None]).data[0]
            D = x.shape[-1]
            cache = [np.zeros((layout.T, D)) for _ in range(n_layers)]
            out = np.zeros((layout.T, D))
            for s in layout.segments:
                n_c = s.center_end - s.center_start
                cur = x[s.center_start : s.right_end]
                pos_cur = np.arange(s.center_start, s.right_end)
                for i in range(n_layers):
                    cache[i][s.center_start : s.center_end] = cur[:n_c]
                    left = cache[i][s.left_start : s.center_start]
                    seq = np.concatenate([left, cur])[None]
                    pos = np.concatenate([np.arange(s.left_start, s.center_start), pos_cur])
                    rel = np.clip(pos[None, :] - pos[:, None], -c, c) + c
                    n = len(pos)
                    allow = np.ones((1, n, n), dtype=bool)
                    cur = self._layer(Tensor(seq), i, allow, rel[None], masks).data[0, len(left) :]
                out[s.center_start : s.center_end] = cur[:n_c]
        return out

    # -- predictor -----------------------------------------------------------
    def _check_labels(self, labels: np.ndarray) -> None:
        V = self.cfg.vocab_size
        if labels.size and (labels.min() < 0 or labels.max() > V):
            raise LabelError(f"label outside [0, {V}]")

    def predict(self, labels, masks: Masks | None = None) -> Tensor:
        """Predictor outputs ``[B, U+1, P]`` for label histories ``[B, U]``.

        Output ``u`` summarizes ``y_0 .. y_u`` with ``y_0`` the blank start symbol.
        """
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[None]
        self._check_labels(labels)
        B, U = labels.shape
        p = self.params
        inputs = np.concatenate([np.full((B, 1), BLANK, dtype=np.int64), labels], axis=1)
        emb = F.embedding(p["pred.embed"], inputs)
        xin = F.linear(emb, self._w("pred.w_ih", masks), p["pred.b_h"]).transpose(1, 0, 2)
        w_hh = self._w("pred.w_hh", masks)
        h = None
        outs = []
        for u in range(U + 1):
            z = xin[u]
            if h is not None:
                z = z + F.linear(h, w_hh)
            h = F.tanh(z)
            outs.append(h)
        hs = stack(outs, axis=1)
        return F.linear(hs, self._w("pred.w_proj", masks), p["pred.b_proj"])

    def predictor_step(self, masks: Masks | None = None) -> "PredictorStep":
        return PredictorStep(self, masks)

    # -- joiner --------------------------------------------------------------
    def join(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """Logits ``[B, T, U+1, V+1]`` from ``[B, T, D]`` and ``[B, U+1, P]``."""
        p = self.params
        if h_enc.shape[-1] != p["join.w_enc"].shape[1] or h_pred.shape[-1] != p["join.w_pred"].shape[1]:
            raise DimensionError("joiner input dims do not match its projections")
        a = F.linear(h_enc, p["join.w_enc"], p["join.b"])
        c = F.linear(h_pred, p["join.w_pred"])
        B, T, J = a.shape
        z = F.tanh(a.reshape(B, T, 1, J) + c.reshape(B, 1, c.shape[1], J))
        return F.linear(z, p["join.w_out"], p["join.b_out"])

    def join_frame(self, h_enc: np.ndarray, h_pred: np.ndarray) -> np.ndarray:
        """Single-node logits ``[B, V+1]``, used by greedy search."""
        with no_grad():
            p = self.params
            a = F.linear(Tensor(h_enc), p["join.w_enc"], p["join.b"])
            c = F.linear(Tensor(h_pred), p["join.w_pred"])
            return F.linear(F.tanh(a + c), p["join.w_out"], p["join.b_out"]).data

    # -- losses ----------------------------------------------------------------
    def rnnt_losses(self, batch, layouts, masks: Masks | None = None) -> Tensor:
        """Per-utterance RNN-T losses ``[B]``."""
        stacked, t_lens = stack_frames(batch.feats, batch.frame_lens, self.cfg.encoder.feature_stride)
        h_enc = self.encode(stacked, layouts, masks, t_lens)
        h_pred = self.predict(batch.labels, masks)
        logp = F.log_softmax(self.join(h_enc, h_pred))
        return rnnt_loss_batch(logp, batch.labels, t_lens, batch.label_lens)


class PredictorStep:
    """Incremental predictor for greedy search (state = recurrent hidden)."""

    def __init__(self, model: RnntModel, masks: Masks | None):
        self.model = model
        self.masks = masks

    def initial_state(self, batch: int):
        return np.zeros((batch, self.model.cfg.pred_dim))

    def step(self, labels: np.ndarray, state: np.ndarray):
        m = self.model
        p = m.params
        with no_grad():
            emb = F.embedding(p["pred.embed"], np.asarray(labels, dtype=np.int64))
            z = F.linear(emb, m._w("pred.w_ih", self.masks), p["pred.b_h"])
            z = z + F.linear(Tensor(state), m._w("pred.w_hh", self.masks))
            h = F.tanh(z)
            out = F.linear(h, m._w("pred.w_proj", self.masks), p["pred.b_proj"])
        return out.data, h.data
