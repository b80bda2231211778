"""Small controlled experiments built from the library pieces.

* :func:`lasso_toy_run` trains one block-structured linear regression
  supernet and reports block norms at the first pruning step.
* :func:`phase_ordering` compares learning the encoder mask during
  pretraining against pruning everything during RNN-T fine-tuning.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import Tensor, parameter
from .config import TrainConfig
from .optim import AdamW, OptimizerConfig, TriStageConfig, lr_at
from .sparsity import (
    BlockMask,
    PruneSchedule,
    apply_mask,
    block_norms,
    group_lasso_decay,
    group_lasso_lambda,
    update_mask,
)
from .trainer import run_pretrain, run_supernet


@dataclass
class LassoToyResult:
    lam: float
    norms_at_t0: np.ndarray  # block L2 norms, grid shape
    final_sparsity: float
    final_loss: float

    def near_zero(self, rel: float = 1e-3) -> int:
        """Blocks whose norm is below ``rel`` times the mean block norm."""
        return int((self.norms_at_t0 < rel * self.norms_at_t0.mean()).sum())


def lasso_toy_run(
    lam: float,
    steps: int = 2000,
    schedule: PruneSchedule = PruneSchedule(),
    shape: tuple[int, int] = (32, 16),
    samples: int = 256,
    batch: int = 32,
    lr_peak: float = 1e-2,
    noise: float = 0.05,
    seed: int = 0,
) -> LassoToyResult:
    """Linear regression ``y = W x`` whose true ``W`` has half its 8x1 blocks at zero.

    Each step samples dense or masked training with equal probability; the
    mask follows ``schedule`` and group lasso runs until the mask freezes.
    """
    rng = np.random.default_rng([seed, 7])
    gr, gc = shape[0] // 8, shape[1]
    true_alive = rng.permutation(gr * gc) < (gr * gc) // 2
    W_true = rng.normal(size=shape) * np.repeat(true_alive.reshape(gr, gc), 8, axis=0)
    X = rng.normal(size=(samples, shape[1]))
    Y = X @ W_true.T + noise * rng.normal(size=(samples, shape[0]))

    W = parameter(rng.normal(0, 1 / np.sqrt(shape[1]), shape), "w")
    opt = AdamW({"w": W}, OptimizerConfig(lr_peak=lr_peak, weight_decay=0.0))
    lr_cfg = TriStageConfig()
    mask = BlockMask.dense("w", shape)
    norms_t0 = None
    loss = float("nan")
    for step in range(steps):
        if step == schedule.t0:
            norms_t0 = block_norms(W.data)
        k = schedule.prune_round(step)
        if k is not None:
            mask = update_mask(W.data, mask, schedule.remaining_after(k))
        if step == schedule.freeze_step:
            mask.freeze()
        masked = bool(rng.random() < 0.5)
        idx = rng.integers(samples, size=batch)
        W.zero_grad()
        Wv = apply_mask(W, mask) if masked else W
        pred = F.linear(Tensor(X[idx]), Wv)
        out = F.mse_masked(pred, Y[idx], np.ones(1))
        out.backward()
        loss = out.item()
        lr = lr_at(step + 1, steps, lr_peak, lr_cfg)
        opt.step({"w": W.grad}, lr, {"w": ~mask.keep()} if masked else None)
        if lam > 0 and step < schedule.freeze_step:
            group_lasso_decay(W.data, group_lasso_lambda(W.data, lam), lr, ~mask.bits if masked else None)
    if norms_t0 is None:
        raise ValueError("schedule.t0 lies beyond the run")
    return LassoToyResult(lam, norms_t0, mask.sparsity, loss)


@dataclass
class PhaseOrderingResult:
    seeds: list[int]
    pretrain_pruned: list[float]  # best streaming validation loss per seed
    finetune_pruned: list[float]

    @property
    def medians(self) -> tuple[float, float]:
        return statistics.median(self.pretrain_pruned), statistics.median(self.finetune_pruned)

    @property
    def holds(self) -> bool:
        a, b = self.medians
        return a <= b


def phase_ordering_config(seed: int) -> TrainConfig:
    return TrainConfig().replace(
        **{
            "seed": seed,
            "data.seed": seed,
            "phases.pretrain_steps": 1000,
            "phases.finetune_steps": 1000,
            "eval_every": 250,
        }
    )


def phase_ordering(out_dir: str | Path, seeds=(0, 1, 2, 3, 4), progress=None) -> PhaseOrderingResult:
    """Two pipelines with identical step budgets per seed.

    A: pretrain with pruning, then fine-tune with the encoder mask frozen
       while the predictor is pruned.
    B: dense pretrain, then prune encoder and predictor during fine-tuning.
    """
    out = Path(out_dir)
    a_losses, b_losses = [], []
    for seed in seeds:
        cfg = phase_ordering_config(seed)
        root = out / f"seed-{seed}"
        pa = run_pretrain(cfg, root / "a-pretrain", prune=True)
        fa = run_supernet(cfg, root / "a-finetune", init=pa.checkpoints[-1], phase="finetune")
        pb = run_pretrain(cfg, root / "b-pretrain", prune=False)
        fb = run_supernet(cfg, root / "b-finetune", init=pb.checkpoints[-1], phase="finetune")
        a_losses.append(fa.summary["best_streaming_loss"])
        b_losses.append(fb.summary["best_streaming_loss"])
        if progress:
            progress(f"seed {seed}: pretrain-pruned {a_losses[-1]:.4f}, finetune-pruned {b_losses[-1]:.4f}")
    return PhaseOrderingResult(list(seeds), a_losses, b_losses)
