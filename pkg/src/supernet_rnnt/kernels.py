"""Block-sparse matrix-vector product for 8x1-pruned weights.

Storage is compressed by 8-row groups: for each row group ``r`` the alive
block columns are listed in ascending order (``block_cols``) with their
8 stored values (``values``), delimited by ``block_ptr``.  Each stored block
contributes to 8 contiguous outputs, so row groups are independent and can
be processed in parallel without shared writes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DimensionError
from .sparsity import BLOCK_ROWS, BlockMask, update_mask

# prefer layers that need no external TBB runtime
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@dataclass
class BlockSparseMatrix:
    rows: int
    cols: int
    block_ptr: np.ndarray  # int64 [rows // 8 + 1]
    block_cols: np.ndarray  # int64 [nnz_blocks]
    values: np.ndarray  # float64 [nnz_blocks, 8]

    @classmethod
    def from_masked(cls, W: np.ndarray, mask: BlockMask) -> BlockSparseMatrix:
        W = np.asarray(W, dtype=np.float64)
        if W.shape != mask.weight_shape:
            raise DimensionError(f"weight shape {W.shape} != mask shape {mask.weight_shape}")
        gr, gc = mask.grid_rows, mask.grid_cols
        counts = mask.bits.sum(axis=1)
        ptr = np.zeros(gr + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        r_idx, c_idx = np.nonzero(mask.bits)  # row-major: ascending column within a group
        blocks = W.reshape(gr, BLOCK_ROWS, gc).transpose(0, 2, 1)
        return cls(W.shape[0], W.shape[1], ptr, c_idx.astype(np.int64), np.ascontiguousarray(blocks[r_idx, c_idx]))

    @property
    def nnz_blocks(self) -> int:
        return int(self.block_cols.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows // BLOCK_ROWS, self.cols, BLOCK_ROWS))
        groups = np.repeat(np.arange(self.rows // BLOCK_ROWS), np.diff(self.block_ptr))
        out[groups, self.block_cols] = self.values
        return out.transpose(0, 2, 1).reshape(self.rows, self.cols)

    def matvec(self, x: np.ndarray, out: np.ndarray | None = None, parallel: bool = False) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.cols,):
            raise DimensionError(f"vector of length {self.cols} expected, got shape {x.shape}")
        if out is None:
            out = np.empty(self.rows)
        elif out.shape != (self.rows,) or out.dtype != np.float64:
            raise DimensionError(f"output buffer must be float64 of length {self.rows}")
        kernel = _spmv_parallel if parallel else _spmv
        kernel(self.block_ptr, self.block_cols, self.values, x, out)
        return out


@numba.njit(cache=True)
def _spmv(block_ptr, block_cols, values, x, y):
    y[:] = 0.0
    for g in range(block_ptr.size - 1):
        base = g * 8
        for k in range(block_ptr[g], block_ptr[g + 1]):
            xv = x[block_cols[k]]
            for i in range(8):
                y[base + i] += values[k, i] * xv


@numba.njit(cache=True, parallel=True)
def _spmv_parallel(block_ptr, block_cols, values, x, y):
    for g in numba.prange(block_ptr.size - 1):
        base = g * 8
        for i in range(8):
            y[base + i] = 0.0
        for k in range(block_ptr[g], block_ptr[g + 1]):
            xv = x[block_cols[k]]
            for i in range(8):
                y[base + i] += values[k, i] * xv


def spmv(A: BlockSparseMatrix, x: np.ndarray) -> np.ndarray:
    return A.matvec(x)


def spmv_counting(A: BlockSparseMatrix, x: np.ndarray) -> tuple[np.ndarray, int]:
    """Plain-Python reference that also returns its multiply count."""
    y = np.zeros(A.rows)
    mults = 0
    for g in range(A.rows // BLOCK_ROWS):
        for k in range(A.block_ptr[g], A.block_ptr[g + 1]):
            xv = x[A.block_cols[k]]
            for i in range(BLOCK_ROWS):
                y[g * BLOCK_ROWS + i] += A.values[k, i] * xv
                mults += 1
    return y, mults


def random_mask(shape: tuple[int, int], sparsity: float, rng: np.random.Generator, layer: str = "bench") -> BlockMask:
    """Mask with ``ceil((1 - sparsity) * blocks)`` alive blocks chosen uniformly."""
    mask = BlockMask.dense(layer, shape)
    scores = rng.random(shape)
    return update_mask(scores, mask, 1.0 - sparsity)


def _median_ns(fn, reps: int) -> float:
    fn()  # warm-up (includes JIT compile on first use)
    times = []
    for _ in range(reps):
        t = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t)
    return float(np.median(times))


def bench(dim: int = 1024, sparsity: float = 0.87, reps: int = 101, seed: int = 0) -> dict:
    """Median dense and block-sparse matvec times on a random masked ``dim x dim`` matrix."""
    if dim % BLOCK_ROWS:
        raise DimensionError(f"dim must be a multiple of {BLOCK_ROWS}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    mask = random_mask((dim, dim), sparsity, rng)
    W = np.where(mask.keep(), rng.normal(size=(dim, dim)), 0.0)
    x = rng.normal(size=dim)
    A = BlockSparseMatrix.from_masked(W, mask)
    y = np.empty(dim)
    dense_ns = _median_ns(lambda: np.dot(W, x, out=y), reps)
    sparse_ns = _median_ns(lambda: A.matvec(x, out=y), reps)
    return {
        "dim": dim,
        "sparsity": sparsity,
        "dense_ns": dense_ns,
        "sparse_ns": sparse_ns,
        "speedup": dense_ns / sparse_ns,
    }


def bench_json(**kwargs) -> str:
    return json.dumps(bench(**kwargs), sort_keys=True)
