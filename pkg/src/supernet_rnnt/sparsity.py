"""8x1 block pruning masks, iterative magnitude pruning and group lasso decay.

A weight matrix ``W`` of shape ``[out, in]`` is tiled into blocks of 8
consecutive output rows by one input column.  Block ``(r, c)`` covers
``W[8r:8r+8, c]`` and has row-major index ``r * in + c``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, make_node
from .errors import DimensionError, FrozenMaskError, ScheduleError

BLOCK_ROWS = 8
BLOCK_COLS = 1
BLOCK_SHAPE = (BLOCK_ROWS, BLOCK_COLS)
ZERO_NORM_EPS = 1e-12


def _as_array(W) -> np.ndarray:
    return W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)


def block_grid(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) != 2:
        raise DimensionError(f"block pruning needs a 2-D weight, got shape {shape}")
    rows, cols = shape
    if rows % BLOCK_ROWS or cols % BLOCK_COLS:
        raise DimensionError(f"weight shape {shape} is not a multiple of the 8x1 block")
    return rows // BLOCK_ROWS, cols // BLOCK_COLS


def _blocks(W: np.ndarray) -> np.ndarray:
    """View ``W`` as [grid_rows, 8, cols]."""
    gr, _ = block_grid(W.shape)
    return W.reshape(gr, BLOCK_ROWS, W.shape[1])


def sparsity_after(p: float, n: int) -> float:
    """Fraction of weights removed after ``n`` rounds each pruning ``p`` of the rest."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if n < 0:
        raise ValueError("n must be non-negative")
    return 1.0 - (1.0 - p) ** n


@dataclass(frozen=True)
class PruneSchedule:
    """Prune ``p`` of the remaining blocks every ``delta_t`` steps, ``n`` times, from ``t0``."""

    t0: int = 300
    delta_t: int = 50
    p: float = 0.2
    n: int = 5

    def __post_init__(self):
        if self.t0 < 0 or self.delta_t < 1 or not 0.0 < self.p < 1.0 or self.n < 0:
            raise ScheduleError(f"invalid prune schedule {self}")

    @property
    def target(self) -> float:
        return sparsity_after(self.p, self.n)

    @property
    def freeze_step(self) -> int:
        return self.t0 + self.n * self.delta_t

    @property
    def prune_steps(self) -> list[int]:
        return [self.t0 + k * self.delta_t for k in range(self.n)]

    def remaining_after(self, k: int) -> float:
        return (1.0 - self.p) ** k

    def prune_round(self, step: int) -> int | None:
        """1-based pruning round that fires at ``step``, or None."""
        if step < self.t0 or step >= self.freeze_step:
            return None
        offset = step - self.t0
        if offset % self.delta_t:
            return None
        return offset // self.delta_t + 1


@dataclass
class GroupLassoConfig:
    lam: float = 0.0
    active_until: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("group lasso lambda must be >= 0")

    def active(self, step: int) -> bool:
        return self.lam > 0 and step < self.active_until


@dataclass
class BlockMask:
    """Alive/pruned flag per 8x1 block of one weight matrix."""

    layer: str
    grid_rows: int
    grid_cols: int
    bits: np.ndarray = field(repr=False)
    frozen: bool = False

    @classmethod
    def dense(cls, layer: str, weight_shape: tuple[int, int]) -> BlockMask:
        gr, gc = block_grid(tuple(weight_shape))
        return cls(layer, gr, gc, np.ones((gr, gc), dtype=bool))

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(self.grid_rows, self.grid_cols)

    @property
    def block_shape(self) -> tuple[int, int]:
        return BLOCK_SHAPE

    @property
    def weight_shape(self) -> tuple[int, int]:
        return self.grid_rows * BLOCK_ROWS, self.grid_cols * BLOCK_COLS

    @property
    def total_blocks(self) -> int:
        return self.bits.size

    @property
    def alive_blocks(self) -> int:
        return int(self.bits.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.alive_blocks / self.total_blocks

    def dense_mask(self) -> np.ndarray:
        """Elementwise 0/1 mask with the weight's shape."""
        return np.repeat(self.bits, BLOCK_ROWS, axis=0).astype(np.float64)

    def keep(self) -> np.ndarray:
        return np.repeat(self.bits, BLOCK_ROWS, axis=0)

    def freeze(self) -> None:
        self.frozen = True

    def copy(self) -> BlockMask:
        return BlockMask(self.layer, self.grid_rows, self.grid_cols, self.bits.copy(), self.frozen)

    # -- export format: JSON header line + LSB-first packed bitmap --------
    def header(self) -> dict:
        return {
            "layer": self.layer,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "block_shape": list(BLOCK_SHAPE),
            "sparsity": self.sparsity,
            "frozen": self.frozen,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode() + b"\n"
        return head + np.packbits(self.bits.reshape(-1), bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> BlockMask:
        head, _, body = blob.partition(b"\n")
        meta = json.loads(head)
        if list(meta.get("block_shape", [])) != list(BLOCK_SHAPE):
            raise DimensionError(f"unsupported block shape {meta.get('block_shape')}")
        n = meta["grid_rows"] * meta["grid_cols"]
        raw = np.frombuffer(body, dtype=np.uint8)
        if raw.size != (n + 7) // 8:
            raise DimensionError("mask bitmap length does not match its header")
        bits = np.unpackbits(raw, count=n, bitorder="little").astype(bool)
        return cls(meta["layer"], meta["grid_rows"], meta["grid_cols"], bits, bool(meta.get("frozen", False)))

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> BlockMask:
        return cls.from_bytes(Path(path).read_bytes())


def block_scores(W) -> np.ndarray:
    """L1 magnitude of every 8x1 block, shape [grid_rows, grid_cols]."""
    return np.abs(_blocks(_as_array(W))).sum(axis=1)


def block_norms(W) -> np.ndarray:
    """L2 norm of every 8x1 block, shape [grid_rows, grid_cols]."""
    b = _blocks(_as_array(W))
    return np.sqrt((b * b).sum(axis=1))


def kept_count(remaining: float, total: int) -> int:
    # tolerance keeps e.g. 0.8**2 * 100 = 64.00000000000001 at 64
    return int(math.ceil(remaining * total - 1e-9))


def update_mask(W, mask: BlockMask, remaining_target: float) -> BlockMask:
    """Return a new mask keeping the top ``ceil(remaining_target * total)`` blocks.

    Only currently-alive blocks compete; among equal scores the lower block
    index is pruned first.
    """
    if mask.frozen:
        raise FrozenMaskError(f"mask for {mask.layer!r} is frozen")
    W = _as_array(W)
    if W.shape != mask.weight_shape:
        raise DimensionError(f"weight shape {W.shape} != mask shape {mask.weight_shape}")
    total = mask.total_blocks
    keep = kept_count(remaining_target, total)
    alive = mask.alive_blocks
    if keep > alive:
        raise ScheduleError(
            f"{mask.layer}: target keeps {keep} blocks but only {alive} are alive"
        )
    new = mask.copy()
    n_prune = alive - keep
    if n_prune == 0:
        return new
    flat_bits = new.bits.reshape(-1)
    alive_idx = np.flatnonzero(flat_bits)
    scores = block_scores(W).reshape(-1)[alive_idx]
    order = np.argsort(scores, kind="stable")
    flat_bits[alive_idx[order[:n_prune]]] = False
    return new


def apply_mask(W: Tensor, mask: BlockMask) -> Tensor:
    """``mask * W`` as a graph node; pruned positions get gradient exactly 0.0."""
    if W.shape != mask.weight_shape:
        raise DimensionError(f"weight shape {W.shape} != mask shape {mask.weight_shape}")
    keep = mask.keep()
    return make_node(np.where(keep, W.data, 0.0), (W,), lambda g: (np.where(keep, g, 0.0),))


def group_lasso_lambda(W, lam: float) -> float:
    """Per-layer strength: ``lam`` times the mean block L2 norm."""
    norms = block_norms(W)
    if norms.size == 0:
        raise DimensionError("empty block grid")
    return float(lam * norms.mean())


def group_lasso_decay(
    W: np.ndarray, lam_i: float, lr: float, skip: np.ndarray | None = None
) -> np.ndarray:
    """Shrink each block along its own direction by ``lr * lam_i`` in norm.

    Applies ``W_g <- max(0, 1 - lr * lam_i / ||W_g||) * W_g`` in place and
    returns ``W``.  Blocks with norm at most 1e-12 are left untouched, as are
    blocks flagged in the optional boolean ``skip`` grid.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    blocks = _blocks(W)
    norms = np.sqrt((blocks * blocks).sum(axis=1))
    live = norms > ZERO_NORM_EPS
    if skip is not None:
        live &= ~skip
    factor = np.ones_like(norms)
    factor[live] = np.maximum(0.0, 1.0 - lr * lam_i / norms[live])
    blocks *= factor[:, None, :]
    return W


def penalty_value(layers, lam: float) -> float:
    """Reporting-only value of the block lasso term summed over ``layers``."""
    total = 0.0
    for W in layers:
        norms = block_norms(W)
        total += lam * norms.mean() * norms.sum()
    return float(total)
