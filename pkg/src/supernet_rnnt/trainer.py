"""Supernet training: dual-mode sampling, iterative block pruning, group lasso.

Three entry points drive whole runs:

* :func:`run_supernet` trains the RNN-T supernet (``train`` / ``finetune``).
* :func:`run_pretrain` trains the encoder alone on masked-frame
  reconstruction, learning (and freezing) the encoder masks.
* :func:`evaluate` scores one operating point on a dataset.

Every run writes ``metrics.jsonl`` (one :class:`StepReport` per step),
``metrics.csv``, ``timings.jsonl``, ``mask_log.jsonl``, periodic checkpoints
and, for RNN-T runs, ``best_streaming`` / ``best_nonstreaming`` pointers.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from .autograd import Tensor, no_grad, parameter
from .checkpoint import load_checkpoint, save_checkpoint
from .chunking import Mode, ModeSampler, sample_mode
from .config import TrainConfig, dump_config, from_flat, to_flat
from .data import Batch, Utterance, batches, make_dataset, sample_batch
from .errors import CheckpointError, DivergenceError, InvariantError
from .model import RnntModel, stack_frames
from .optim import AdamW, lr_at
from .rnnt import greedy_decode_batch, rnnt_loss_batch
from .sparsity import (
    BlockMask,
    GroupLassoConfig,
    PruneSchedule,
    group_lasso_decay,
    group_lasso_lambda,
    kept_count,
    penalty_value,
    update_mask,
)


@dataclass
class StepReport:
    step: int
    mode: list[str]
    loss: float
    lr: float
    sparsity: dict[str, float]
    lasso: float
    wall_time: float = 0.0

    def to_record(self) -> dict:
        """Deterministic fields only; wall time is logged separately."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class RunResult:
    out_dir: Path
    reports: list[StepReport] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    model: RnntModel | None = None
    masks: dict[str, BlockMask] = field(default_factory=dict)


def token_accuracy(hyps: list[list[int]], refs: list[list[int]]) -> float:
    """Position-wise matches over ``max(len(hyp), len(ref))``, pooled over utterances."""
    hits = total = 0
    for h, r in zip(hyps, refs):
        hits += sum(int(a == b) for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 1.0


def _layouts(sampler: ModeSampler, lengths, mode: Mode):
    return [sampler.layout(int(n), mode) for n in lengths]


def evaluate(
    model: RnntModel,
    dataset: list[Utterance],
    mode: Mode,
    sampler: ModeSampler,
    masks: dict[str, BlockMask] | None = None,
    batch_size: int = 64,
    max_symbols: int = 3,
) -> dict:
    """Mean RNN-T loss and greedy token accuracy; masks are used iff ``mode`` is streaming."""
    if not dataset:
        raise ValueError("empty evaluation set")
    use = masks if mode.streaming else None
    stride = model.cfg.encoder.feature_stride
    losses, hyps, refs = [], [], []
    with no_grad():
        for batch in batches(dataset, batch_size):
            stacked, t_lens = stack_frames(batch.feats, batch.frame_lens, stride)
            h_enc = model.encode(stacked, _layouts(sampler, t_lens, mode), use, t_lens)
            h_pred = model.predict(batch.labels, use)
            logp = F.log_softmax(model.join(h_enc, h_pred))
            losses.extend(rnnt_loss_batch(logp, batch.labels, t_lens, batch.label_lens).data.tolist())
            hyps += greedy_decode_batch(
                h_enc.data, t_lens, model.predictor_step(use), model.join_frame, max_symbols
            )
            refs += [list(batch.labels[b, : batch.label_lens[b]]) for b in range(len(batch))]
    return {"loss": float(np.mean(losses)), "accuracy": token_accuracy(hyps, refs)}


# -- reconstruction pretraining objective ------------------------------------


def add_reconstruction_head(model: RnntModel, seed: int) -> None:
    e = model.cfg.encoder
    S = e.input_dim * e.feature_stride
    rng = np.random.default_rng([seed, 4241])
    model.params["recon.w"] = parameter(rng.normal(0, 1 / np.sqrt(e.embed_dim), (S, e.embed_dim)), "recon.w")
    model.params["recon.b"] = parameter(np.zeros(S), "recon.b")


def frame_mask(lengths, T_max: int, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean [B, T_max]: which valid frames are hidden (at least one per utterance)."""
    lengths = np.asarray(lengths)
    hide = (rng.random((len(lengths), T_max)) < prob) & (np.arange(T_max)[None, :] < lengths[:, None])
    for b in np.flatnonzero(~hide.any(axis=1)):
        hide[b, rng.integers(lengths[b])] = True
    return hide


def reconstruction_loss(model: RnntModel, batch: Batch, hide: np.ndarray, sampler: ModeSampler, masks) -> Tensor:
    """Squared error on hidden raw frames; ``hide`` is ``[B, frames]``."""
    stride = model.cfg.encoder.feature_stride
    stacked, t_lens = stack_frames(batch.feats, batch.frame_lens, stride)
    corrupted, _ = stack_frames(np.where(hide[:, :, None], 0.0, batch.feats), batch.frame_lens, stride)
    B, T, S = stacked.shape
    fdim = batch.feats.shape[2]
    weight = np.repeat(hide[:, : T * stride], fdim, axis=1).reshape(B, T, S)
    h = model.encode(corrupted, _layouts(sampler, t_lens, sampler.full()), masks, t_lens)
    pred = F.linear(h, model.params["recon.w"], model.params["recon.b"])
    return F.mse_masked(pred, stacked, weight)


# -- the trainer ---------------------------------------------------------------


@dataclass
class Work:
    """One simulated data-parallel worker's share of a step."""

    batch: Batch
    mode: Mode
    masked: bool
    rng: np.random.Generator


class SupernetTrainer:
    """Owns the optimizer, masks and schedule for one training phase."""

    def __init__(
        self,
        cfg: TrainConfig,
        model: RnntModel,
        masks: dict[str, BlockMask],
        *,
        total_steps: int,
        lr_peak: float,
        schedule: PruneSchedule,
        objective: str = "rnnt",
        trainable: list[str] | None = None,
        lasso: GroupLassoConfig | None = None,
    ):
        self.cfg = cfg
        self.model = model
        self.masks = masks
        self.total = total_steps
        self.lr_peak = lr_peak
        self.schedule = schedule
        self.objective = objective
        names = trainable if trainable is not None else list(model.params)
        self.optimizer = AdamW({n: model.params[n] for n in names}, cfg.optimizer)
        self.lasso = lasso or GroupLassoConfig(0.0, 0)
        self.mask_log: list[dict] = []
        self._frozen_snapshot: dict[str, bytes] = {}

    @property
    def prune_names(self) -> list[str]:
        return [n for n, m in self.masks.items() if not m.frozen]

    # -- schedule --------------------------------------------------------------
    def apply_schedule(self, step: int) -> None:
        """Prune at ``t0 + k * delta_t`` (k < n); freeze once ``n`` rounds are done."""
        k = self.schedule.prune_round(step)
        if k is not None:
            target = self.schedule.remaining_after(k)
            for name in self.prune_names:
                old = self.masks[name]
                new = update_mask(self.model.params[name].data, old, target)
                if new.alive_blocks != kept_count(target, new.total_blocks):
                    raise InvariantError(f"{name}: alive blocks off schedule after round {k}")
                if np.any(new.bits & ~old.bits):
                    raise InvariantError(f"{name}: a pruned block came back")
                pruned = np.flatnonzero(old.bits.reshape(-1) & ~new.bits.reshape(-1))
                self.mask_log.append({"step": step, "layer": name, "round": k, "pruned": pruned.tolist()})
                self.masks[name] = new
        if step >= self.schedule.freeze_step:
            self.freeze()

    def freeze(self) -> None:
        for name, m in self.masks.items():
            if not m.frozen:
                m.freeze()
            self._frozen_snapshot.setdefault(name, m.to_bytes())

    def check_frozen(self) -> None:
        for name, blob in self._frozen_snapshot.items():
            if self.masks[name].to_bytes() != blob:
                raise InvariantError(f"frozen mask {name} changed")

    # -- one step ----------------------------------------------------------------
    def loss(self, work: Work) -> Tensor:
        masks = self.masks if work.masked else None
        m = self.model
        if self.objective == "rnnt":
            stride = m.cfg.encoder.feature_stride
            t_lens = np.asarray(work.batch.frame_lens) // stride
            return m.rnnt_losses(work.batch, _layouts(self.cfg.sampler, t_lens, work.mode), masks).mean()
        stride = m.cfg.encoder.feature_stride
        usable = np.asarray(work.batch.frame_lens) // stride * stride
        hide = frame_mask(usable, work.batch.feats.shape[1], self.cfg.phases.frame_mask_prob, work.rng)
        return reconstruction_loss(m, work.batch, hide, self.cfg.sampler, masks)

    def worker_gradients(self, work: Work) -> tuple[float, dict[str, np.ndarray]]:
        self.model.zero_grad()
        loss = self.loss(work)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss {value}")
        loss.backward()
        grads = {n: p.grad for n, p in self.optimizer.params.items() if p.grad is not None}
        return value, grads

    def aggregate(self, works: list[Work]) -> tuple[float, dict[str, np.ndarray]]:
        """Average losses and gradients over workers, summed in worker order."""
        total: dict[str, np.ndarray] = {}
        losses = []
        for w in works:
            value, grads = self.worker_gradients(w)
            losses.append(value)
            for n, g in grads.items():
                total[n] = g if n not in total else total[n] + g
        K = len(works)
        return float(np.mean(losses)), {n: g / K for n, g in total.items()}

    def train_step(self, step: int, works: list[Work]) -> StepReport:
        start = time.perf_counter()
        loss, grads = self.aggregate(works)
        all_masked = all(w.masked for w in works)
        frozen = None
        if all_masked:
            frozen = {n: ~m.keep() for n, m in self.masks.items() if n in self.optimizer.params}
        lr = lr_at(step + 1, self.total, self.lr_peak, self.cfg.lr)
        self.optimizer.step(grads, lr, frozen)
        lasso_names = list(self.masks)
        if self.lasso.active(step) and lr > 0:
            for n in lasso_names:
                W = self.model.params[n].data
                lam_i = group_lasso_lambda(W, self.lasso.lam)
                skip = ~self.masks[n].bits if all_masked else None
                group_lasso_decay(W, lam_i, lr, skip)
        penalty = (
            penalty_value([self.model.params[n].data for n in lasso_names], self.lasso.lam)
            if self.lasso.lam > 0
            else 0.0
        )
        return StepReport(
            step=step,
            mode=[("masked" if w.masked else "dense") if self.objective != "rnnt" else w.mode.name for w in works],
            loss=loss,
            lr=lr,
            sparsity={n: m.sparsity for n, m in self.masks.items()},
            lasso=penalty,
            wall_time=time.perf_counter() - start,
        )

    def schedule_state(self) -> dict:
        s = self.schedule
        return {
            "t0": s.t0,
            "delta_t": s.delta_t,
            "p": s.p,
            "n": s.n,
            "target_sparsity": s.target,
            "freeze_step": s.freeze_step,
            "frozen": {n: m.frozen for n, m in self.masks.items()},
        }


# -- run orchestration -----------------------------------------------------------


class RunLogger:
    def __init__(self, out_dir: Path, cfg: TrainConfig):
        self.out = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(dump_config(cfg))
        self.metrics = open(out_dir / "metrics.jsonl", "w")
        self.timings = open(out_dir / "timings.jsonl", "w")
        self.csv_file = open(out_dir / "metrics.csv", "w", newline="")
        self.csv = csv.writer(self.csv_file)
        self.csv.writerow(["step", "loss", "lr", "sparsity", "lasso"])

    def log(self, r: StepReport) -> None:
        self.metrics.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
        self.timings.write(json.dumps({"step": r.step, "wall_time": r.wall_time}) + "\n")
        mean_sp = float(np.mean(list(r.sparsity.values()))) if r.sparsity else 0.0
        self.csv.writerow([r.step, repr(r.loss), repr(r.lr), repr(mean_sp), repr(r.lasso)])

    def close(self, mask_log: list[dict]) -> None:
        self.metrics.close()
        self.timings.close()
        self.csv_file.close()
        with open(self.out / "mask_log.jsonl", "w") as f:
            for rec in mask_log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _worker_rng(seed: int, worker: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, worker, step])


def _params_numpy(model: RnntModel) -> dict[str, np.ndarray]:
    return {n: t.data for n, t in model.params.items()}


def load_encoder(model: RnntModel, masks: dict[str, BlockMask], init: str | Path) -> None:
    """Copy front-end and encoder weights plus frozen encoder masks from ``init``."""
    params, init_masks, _ = load_checkpoint(init)
    for name, t in model.params.items():
        if name.startswith(("frontend.", "enc.")):
            if name not in params:
                raise CheckpointError(f"init checkpoint lacks {name}")
            if params[name].shape != t.shape:
                raise CheckpointError(f"{name}: shape {params[name].shape} != {t.shape}")
            t.data = params[name].copy()
    for name, m in init_masks.items():
        if name in masks and m.frozen:
            if m.weight_shape != masks[name].weight_shape:
                raise CheckpointError(f"mask {name} does not fit the model")
            masks[name] = m


def model_from_checkpoint(path: str | Path) -> tuple[TrainConfig, RnntModel, dict[str, BlockMask], dict]:
    """Rebuild the model, masks and run config stored in a checkpoint."""
    params, masks, manifest = load_checkpoint(path)
    if "config" not in manifest:
        raise CheckpointError(f"{path}: manifest carries no run config")
    cfg = from_flat(manifest["config"])
    model = RnntModel(cfg.model_config(), cfg.seed)
    for name, t in model.params.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if params[name].shape != t.shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {t.shape}")
        t.data = params[name]
    return cfg, model, masks, manifest


def replay_mask_log(initial: dict[str, BlockMask], log: list[dict]) -> dict[str, BlockMask]:
    """Rebuild masks by applying logged pruning events in order."""
    masks = {n: m.copy() for n, m in initial.items()}
    for rec in log:
        m = masks[rec["layer"]]
        flat = m.bits.reshape(-1)
        flat[np.asarray(rec["pruned"], dtype=np.int64)] = False
    return masks


def run_supernet(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    init: str | Path | None = None,
    phase: str = "train",
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Dual-mode RNN-T supernet training with iterative block pruning."""
    total = cfg.steps if phase == "train" else cfg.phases.finetune_steps
    lr_peak = cfg.optimizer.lr_peak if phase == "train" else cfg.phases.finetune_lr_peak
    cfg.validate(total)
    out = Path(out_dir if out_dir is not None else cfg.out)
    model = RnntModel(cfg.model_config(), cfg.seed)
    masks = model.dense_masks()
    if init is not None:
        load_encoder(model, masks, init)
    initial_masks = {n: m.copy() for n, m in masks.items()}
    stride = cfg.model.feature_stride
    train = make_dataset(cfg.data, "train", stride)
    valid = make_dataset(cfg.data, "valid", stride)
    test = make_dataset(cfg.data, "test", stride)
    sampler = cfg.sampler

    trainer = SupernetTrainer(
        cfg,
        model,
        masks,
        total_steps=total,
        lr_peak=lr_peak,
        schedule=cfg.schedule,
        lasso=cfg.lasso_config(),
    )
    result = RunResult(out, model=model, masks=masks)
    logger = RunLogger(out, cfg)
    best = {"streaming": None, "nonstreaming": None}
    try:
        for step in range(total):
            trainer.apply_schedule(step)
            works = []
            for w in range(cfg.workers):
                rng = _worker_rng(cfg.seed, w, step)
                mode = sample_mode(sampler, rng)
                if step < cfg.dense_warmup_steps:
                    mode = sampler.full()
                batch = sample_batch(train, cfg.batch_size, rng)
                works.append(Work(batch, mode, mode.streaming, rng))
            report = trainer.train_step(step, works)
            result.reports.append(report)
            logger.log(report)
            done = step + 1
            if done == cfg.schedule.freeze_step:
                trainer.freeze()
            if done % cfg.eval_every == 0 or done == total:
                trainer.check_frozen()
                metrics = {
                    "streaming": evaluate(model, valid, sampler.streaming(), sampler, masks, max_symbols=cfg.max_symbols),
                    "nonstreaming": evaluate(model, valid, sampler.full(), sampler, None, max_symbols=cfg.max_symbols),
                }
                path = out / "checkpoints" / f"step-{done:06d}"
                save_checkpoint(
                    path, _params_numpy(model), masks, done, metrics, trainer.schedule_state(), {"kind": "rnnt", "config": to_flat(cfg)}
                )
                result.checkpoints.append(path)
                rel = str(path.relative_to(out))
                if best["nonstreaming"] is None or metrics["nonstreaming"]["loss"] < best["nonstreaming"][0]:
                    best["nonstreaming"] = (metrics["nonstreaming"]["loss"], rel)
                if done >= cfg.schedule.freeze_step and (
                    best["streaming"] is None or metrics["streaming"]["loss"] < best["streaming"][0]
                ):
                    best["streaming"] = (metrics["streaming"]["loss"], rel)
                if progress:
                    progress(
                        f"step {done}: stream loss {metrics['streaming']['loss']:.4f} "
                        f"acc {metrics['streaming']['accuracy']:.3f} | full loss "
                        f"{metrics['nonstreaming']['loss']:.4f} acc {metrics['nonstreaming']['accuracy']:.3f}"
                    )
    finally:
        logger.close(trainer.mask_log)

    replayed = replay_mask_log(initial_masks, trainer.mask_log)
    for n, m in masks.items():
        if not np.array_equal(replayed[n].bits, m.bits):
            raise InvariantError(f"mask log replay disagrees for {n}")

    summary = {
        "phase": phase,
        "steps": total,
        "final_sparsity": {n: m.sparsity for n, m in masks.items()},
    }
    for which in ("streaming", "nonstreaming"):
        loss, rel = best[which]
        (out / f"best_{which}").write_text(rel + "\n")
        _, scored, ck_masks, _ = model_from_checkpoint(out / rel)
        mode = sampler.streaming() if which == "streaming" else sampler.full()
        test_metrics = evaluate(scored, test, mode, sampler, ck_masks, max_symbols=cfg.max_symbols)
        summary[f"best_{which}_checkpoint"] = rel
        summary[f"best_{which}_loss"] = loss
        summary[f"best_{which}_test_loss"] = test_metrics["loss"]
        summary[f"best_{which}_test_accuracy"] = test_metrics["accuracy"]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    result.summary = summary
    return result


def run_pretrain(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    prune: bool = True,
    constant: float | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Encoder-only masked-frame reconstruction, always full context.

    With ``prune`` each worker applies the encoder masks with probability
    one half, the masks follow the prune schedule, and group lasso (if
    ``lasso.lam > 0``) runs until the schedule completes.  The final
    checkpoint carries the frozen encoder masks.
    """
    total = cfg.phases.pretrain_steps
    if prune:
        cfg.validate(total)
    out = Path(out_dir if out_dir is not None else cfg.out)
    model = RnntModel(cfg.model_config(), cfg.seed)
    add_reconstruction_head(model, cfg.seed)
    masks = {n: BlockMask.dense(n, model.params[n].shape) for n in model.encoder_prunable} if prune else {}
    trainable = [n for n in model.params if n.startswith(("frontend.", "enc.", "recon."))]
    stride = cfg.model.feature_stride
    train = make_dataset(cfg.data, "train", stride, constant)
    valid = make_dataset(cfg.data, "valid", stride, constant)
    sampler = cfg.sampler
    schedule = cfg.schedule if prune else PruneSchedule(cfg.schedule.t0, cfg.schedule.delta_t, cfg.schedule.p, 0)
    trainer = SupernetTrainer(
        cfg,
        model,
        masks,
        total_steps=total,
        lr_peak=cfg.phases.pretrain_lr_peak,
        schedule=schedule,
        objective="recon",
        trainable=trainable,
        lasso=cfg.lasso_config(schedule) if prune else None,
    )
    eval_rng_seed = [cfg.data.seed, 99]

    def recon_eval(use_masks: bool) -> float:
        rng = np.random.default_rng(eval_rng_seed)
        vals, weights = [], []
        with no_grad():
            for batch in batches(valid, 64):
                usable = np.asarray(batch.frame_lens) // stride * stride
                hide = frame_mask(usable, batch.feats.shape[1], cfg.phases.frame_mask_prob, rng)
                loss = reconstruction_loss(model, batch, hide, sampler, masks if use_masks else None)
                vals.append(loss.item())
                weights.append(hide.sum())
        return float(np.average(vals, weights=weights))

    result = RunResult(out, model=model, masks=masks)
    logger = RunLogger(out, cfg)

    def checkpoint(done: int, tag: str) -> Path:
        metrics = {"recon_dense": recon_eval(False)}
        if masks:
            metrics["recon_masked"] = recon_eval(True)
        path = out / "checkpoints" / tag
        save_checkpoint(path, _params_numpy(model), masks, done, metrics, trainer.schedule_state(), {"kind": "pretrain", "config": to_flat(cfg)})
        result.checkpoints.append(path)
        if progress:
            progress(f"step {done}: " + ", ".join(f"{k} {v:.5f}" for k, v in metrics.items()))
        return path

    try:
        for step in range(total):
            if step == schedule.t0 and prune:
                checkpoint(step, "t0")
            trainer.apply_schedule(step)
            works = []
            for w in range(cfg.workers):
                rng = _worker_rng(cfg.seed, w, step)
                masked = prune and bool(rng.random() < 0.5)
                batch = sample_batch(train, cfg.batch_size, rng)
                works.append(Work(batch, sampler.full(), masked, rng))
            report = trainer.train_step(step, works)
            result.reports.append(report)
            logger.log(report)
            done = step + 1
            if done == schedule.freeze_step:
                trainer.freeze()
            if done % cfg.eval_every == 0 and done != total:
                trainer.check_frozen()
                checkpoint(done, f"step-{done:06d}")
    finally:
        logger.close(trainer.mask_log)
    trainer.freeze()
    final = checkpoint(total, "final")
    (out / "final").write_text(str(final.relative_to(out)) + "\n")
    result.summary = {
        "phase": "pretrain",
        "steps": total,
        "final_checkpoint": str(final.relative_to(out)),
        "final_sparsity": {n: m.sparsity for n, m in masks.items()},
    }
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return result
