"""Run configuration: nested dataclasses stored as flat JSON with dotted keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .chunking import ModeSampler
from .data import DataConfig
from .errors import ConfigError
from .model import EncoderConfig, ModelConfig
from .optim import OptimizerConfig, TriStageConfig
from .sparsity import GroupLassoConfig, PruneSchedule


@dataclass(frozen=True)
class ModelSection:
    num_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    feature_stride: int = 6
    pos_clip: int = 64
    pred_embed_dim: int = 32
    pred_dim: int = 64
    joint_dim: int = 64


@dataclass(frozen=True)
class PhaseSection:
    pretrain_steps: int = 1000
    finetune_steps: int = 1000
    pretrain_lr_peak: float = 2e-3
    finetune_lr_peak: float = 1e-3
    frame_mask_prob: float = 0.5


@dataclass(frozen=True)
class LassoSection:
    lam: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    workers: int = 2
    seed: int = 0
    eval_every: int = 200
    dense_warmup_steps: int = 0
    max_symbols: int = 3
    out: str = "runs/default"
    model: ModelSection = ModelSection()
    data: DataConfig = DataConfig()
    schedule: PruneSchedule = PruneSchedule()
    lasso: LassoSection = LassoSection()
    sampler: ModeSampler = ModeSampler()
    optimizer: OptimizerConfig = OptimizerConfig()
    lr: TriStageConfig = TriStageConfig()
    phases: PhaseSection = PhaseSection()

    def model_config(self) -> ModelConfig:
        m = self.model
        enc = EncoderConfig(
            num_layers=m.num_layers,
            embed_dim=m.embed_dim,
            ffn_dim=m.ffn_dim,
            num_heads=m.num_heads,
            input_dim=self.data.feature_dim,
            feature_stride=m.feature_stride,
            pos_clip=m.pos_clip,
        )
        return ModelConfig(enc, self.data.vocab_size, m.pred_embed_dim, m.pred_dim, m.joint_dim)

    def lasso_config(self, schedule: PruneSchedule | None = None) -> GroupLassoConfig:
        sched = schedule or self.schedule
        return GroupLassoConfig(self.lasso.lam, sched.freeze_step)

    def validate(self, total_steps: int | None = None) -> None:
        total = self.steps if total_steps is None else total_steps
        if self.batch_size < 1 or self.workers < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, workers and eval_every must be >= 1")
        if self.dense_warmup_steps > self.schedule.t0:
            raise ConfigError("dense_warmup_steps must not exceed schedule.t0")
        if self.schedule.freeze_step > total:
            raise ConfigError(
                f"pruning ends at step {self.schedule.freeze_step}, after the phase's {total} steps"
            )
        longest = self.data.max_frames // self.model.feature_stride
        if self.sampler.tau1 < longest:
            raise ConfigError(f"sampler.tau1 must cover the longest utterance ({longest} frames)")

    def replace(self, **flat: Any) -> TrainConfig:
        d = to_flat(self)
        for k, v in flat.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return from_flat(d)


def to_flat(obj, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, prefix + f.name + "."))
        else:
            out[prefix + f.name] = v
    return out


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def _build(cls, flat: dict[str, Any], prefix: str):
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        dv = getattr(default, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(dv):
            kwargs[f.name] = _build(type(dv), flat, key + ".")
        elif key in flat:
            kwargs[f.name] = _coerce(flat[key], dv, key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


def from_flat(flat: dict[str, Any]) -> TrainConfig:
    known = set(to_flat(TrainConfig()))
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _build(TrainConfig, flat, "")


def load_config(path: str | Path) -> TrainConfig:
    try:
        flat = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(flat, dict):
        raise ConfigError("config file must hold a JSON object")
    return from_flat(flat)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(to_flat(cfg), indent=2, sort_keys=True) + "\n"
