"""AdamW with decoupled weight decay and the tri-stage learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class OptimizerConfig:
    lr_peak: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TriStageConfig:
    warmup_frac: float = 0.1
    hold_frac: float = 0.4
    decay_floor: float = 0.05

    def __post_init__(self):
        if self.warmup_frac < 0 or self.hold_frac < 0 or self.warmup_frac + self.hold_frac > 1:
            raise ConfigError("tri-stage fractions must be >= 0 and sum to at most 1")
        if not 0 < self.decay_floor <= 1:
            raise ConfigError("decay_floor must lie in (0, 1]")


def lr_at(step: int, total: int, peak: float, cfg: TriStageConfig) -> float:
    """Linear warmup, constant hold, then exponential decay to ``decay_floor * peak``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_frac * total
    hold_end = warm + cfg.hold_frac * total
    if step < warm:
        return peak * step / warm
    if step <= hold_end:
        return peak
    decay_len = total - hold_end
    return peak * math.exp(math.log(cfg.decay_floor) * (step - hold_end) / decay_len)


class AdamW:
    """Adam with decoupled weight decay over a named parameter set.

    ``frozen`` maps a parameter name to a boolean array of coordinates that
    must not move this step; their moments are left untouched as well.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float, frozen: dict[str, np.ndarray] | None = None) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            update = lr * ((m / bc1) / (np.sqrt(v / bc2) + c.eps) + c.weight_decay * p.data)
            hold = None if frozen is None else frozen.get(name)
            if hold is None:
                self.m[name], self.v[name] = m, v
                p.data = p.data - update
            else:
                self.m[name] = np.where(hold, self.m[name], m)
                self.v[name] = np.where(hold, self.v[name], v)
                p.data = np.where(hold, p.data, p.data - update)
