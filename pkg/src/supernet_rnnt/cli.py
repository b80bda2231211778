"""Command-line entry point: ``supernet-rnnt <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_manifest
from .chunking import Mode
from .config import TrainConfig, load_config
from .data import make_dataset
from .errors import CheckpointError, ConfigError, SupernetError
from .kernels import bench
from .sparsity import apply_mask, block_norms
from .autograd import Tensor
from .trainer import evaluate, model_from_checkpoint, run_pretrain, run_supernet

HIST_BINS = 16


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat JSON config with dotted keys")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--workers", type=int, help="override the logical worker count")
    p.add_argument("--dry-run", action="store_true", help="validate config and print the schedule only")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="supernet-rnnt", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="dual-mode supernet training with pruning")
    sub.add_parser("pretrain", parents=[common], help="masked-reconstruction encoder pretraining")
    ft = sub.add_parser("finetune", parents=[common], help="RNN-T fine-tuning, optionally from a pretrained encoder")
    ft.add_argument("--init", type=Path, help="pretraining checkpoint directory")

    ev = sub.add_parser("eval", parents=[common], help="loss and token accuracy for one mode")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("--mode", choices=["streaming", "nonstreaming"], default="nonstreaming")
    ev.add_argument("--split", choices=["train", "valid", "test"], default="test")

    mr = sub.add_parser("mask-report", parents=[common], help="per-layer sparsity and block-norm histogram")
    mr.add_argument("checkpoint", type=Path)

    bn = sub.add_parser("bench", parents=[common], help="block-sparse vs dense matvec timing")
    bn.add_argument("--dim", type=int, default=1024)
    bn.add_argument("--sparsity", type=float, default=0.87)
    bn.add_argument("--reps", type=int, default=101)

    dl = sub.add_parser("dump-layout", parents=[common], help="print the segment layout for one utterance length")
    dl.add_argument("--frames", type=int, required=True, help="encoder frames (after stacking)")
    dl.add_argument("--mode", choices=["streaming", "nonstreaming"], default="streaming")
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return cfg.replace(**overrides) if overrides else cfg


def _print_schedule(cfg: TrainConfig, total: int) -> None:
    s = cfg.schedule
    print(
        json.dumps(
            {
                "total_steps": total,
                "t0": s.t0,
                "prune_steps": s.prune_steps,
                "freeze_step": s.freeze_step,
                "target_sparsity": s.target,
            },
            sort_keys=True,
        )
    )


def _mode(sampler, name: str) -> Mode:
    return sampler.streaming() if name == "streaming" else sampler.full()


def cmd_train(args, cfg: TrainConfig) -> int:
    cfg.validate()
    if args.dry_run:
        _print_schedule(cfg, cfg.steps)
        return 0
    result = run_supernet(cfg, progress=print)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    cfg.validate(cfg.phases.pretrain_steps)
    if args.dry_run:
        _print_schedule(cfg, cfg.phases.pretrain_steps)
        return 0
    result = run_pretrain(cfg, progress=print)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_finetune(args, cfg: TrainConfig) -> int:
    cfg.validate(cfg.phases.finetune_steps)
    if args.init is not None:
        load_manifest(args.init)  # fail early on an unreadable checkpoint
    if args.dry_run:
        _print_schedule(cfg, cfg.phases.finetune_steps)
        return 0
    result = run_supernet(cfg, init=args.init, phase="finetune", progress=print)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_eval(args, _cfg) -> int:
    cfg, model, masks, _ = model_from_checkpoint(args.checkpoint)
    if args.mode == "streaming" and not masks:
        raise CheckpointError(f"{args.checkpoint} has no mask files; streaming evaluation needs them")
    data = make_dataset(cfg.data, args.split, cfg.model.feature_stride)
    mode = _mode(cfg.sampler, args.mode)
    m = evaluate(model, data, mode, cfg.sampler, masks, max_symbols=cfg.max_symbols)
    print(f"mode={args.mode} split={args.split} loss={m['loss']:.6f} accuracy={m['accuracy']:.6f}")
    return 0


def mask_report(checkpoint: Path) -> dict:
    """Per-layer sparsity, a block-norm histogram of the masked weights, and nonzero count."""
    _, model, masks, _ = model_from_checkpoint(checkpoint)
    if not masks:
        raise CheckpointError(f"{checkpoint} has no masks")
    layers = {}
    norms = []
    nonzero = 0
    for name, t in model.params.items():
        if name in masks:
            effective = apply_mask(Tensor(t.data), masks[name]).data
            norms.append(block_norms(effective).reshape(-1))
            layers[name] = masks[name].sparsity
        else:
            effective = t.data
        nonzero += int(np.count_nonzero(effective))
    allnorms = np.concatenate(norms)
    positive = allnorms[allnorms > 0]
    lo = float(positive.min()) if positive.size else 1e-12
    hi = float(allnorms.max()) if positive.size else 1.0
    if hi <= lo:
        hi = lo * 10.0
    edges = np.geomspace(lo, hi, HIST_BINS + 1)
    counts, _ = np.histogram(np.clip(allnorms, lo, hi), bins=edges)
    return {
        "sparsity": layers,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist(), "zero_blocks": int((allnorms == 0).sum())},
        "total_blocks": int(allnorms.size),
        "nonzero_params": nonzero,
    }


def cmd_mask_report(args, _cfg) -> int:
    print(json.dumps(mask_report(args.checkpoint), indent=2, sort_keys=True))
    return 0


def cmd_bench(args, _cfg) -> int:
    print(json.dumps(bench(dim=args.dim, sparsity=args.sparsity, reps=args.reps), sort_keys=True))
    return 0


def cmd_dump_layout(args, cfg: TrainConfig) -> int:
    print(cfg.sampler.layout(args.frames, _mode(cfg.sampler, args.mode)).to_json())
    return 0


COMMANDS = {
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "mask-report": cmd_mask_report,
    "bench": cmd_bench,
    "dump-layout": cmd_dump_layout,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SupernetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
