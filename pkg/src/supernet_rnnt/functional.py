"""Neural-network operations on :class:`~supernet_rnnt.autograd.Tensor`.

Each function computes its forward value with numpy and registers an
explicit backward rule.  All of them are checked against central finite
differences in the test-suite.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, as_tensor, make_node, unbroadcast
from .errors import DimensionError, MaskError


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[..., o] = sum_i W[o, i] * x[..., i] + b[o]``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({W.shape[0]},)")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = g @ W.data
        gW = g2.T @ x.data.reshape(-1, W.shape[1])
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_node(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return make_node(np.where(keep, x.data, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),))


def _check_last_dim(z: Tensor, what: str) -> None:
    if z.ndim == 0 or z.shape[-1] < 1:
        raise DimensionError(f"{what} needs a non-empty last dimension, got shape {z.shape}")


def softmax(z: Tensor) -> Tensor:
    _check_last_dim(z, "softmax")
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (z,), backward)


def log_softmax(z: Tensor) -> Tensor:
    _check_last_dim(z, "log_softmax")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (z,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm: gamma/beta must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return make_node(out, (table,), backward)


def gather_time(x: Tensor, index) -> Tensor:
    """``out[b, j] = x[b, index[b, j]]`` for ``x`` of shape [B, T, D]."""
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError("gather_time expects x [B,T,D] and index [B,L]")
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        rows = np.broadcast_to(np.arange(x.shape[0])[:, None], idx.shape)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return make_node(out, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, allow=None, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention restricted to ``allow``.

    ``q``, ``k`` and ``v`` are ``[..., T, D]``.  ``allow`` is a boolean array
    broadcastable to ``[..., Tq, Tk]``; ``None`` means every position is
    allowed.  ``bias`` is an optional additive score term with the same
    broadcast rule.  Disallowed positions get exactly zero weight.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if bias is not None:
        scores = scores + bias.data
    if allow is None:
        allow = np.ones(scores.shape[-2:], dtype=bool)
    else:
        allow = np.asarray(allow, dtype=bool)
        if not allow.any(axis=-1).all():
            raise MaskError("attention mask has a query row with no allowed key")
    scores = np.where(allow, scores, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)
    parents = (q, k, v) if bias is None else (q, k, v, bias)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
        grads = (unbroadcast(gq, q.shape), unbroadcast(gk, k.shape), unbroadcast(gv, v.shape))
        if bias is None:
            return grads
        return grads + (unbroadcast(gs, bias.shape),)

    return make_node(out, parents, backward)


def mse_masked(pred: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """Weighted squared error ``sum(weight * (pred - target)^2) / sum(weight)``.

    ``weight`` broadcasts against ``pred``; the denominator counts weighted
    elements after broadcasting.
    """
    target = np.asarray(target, dtype=np.float64)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), pred.shape)
    denom = max(float(w.sum()), 1.0)
    diff = pred.data - target
    out = np.array((w * diff * diff).sum() / denom)
    return make_node(out, (pred,), lambda g: (g * 2.0 * w * diff / denom,))
