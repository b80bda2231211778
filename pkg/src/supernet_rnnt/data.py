"""Seeded synthetic speech-like task.

Each utterance is a ``[frames, feature_dim]`` sequence made of stride-sized
windows.  Every window sits at one of ``V`` levels plus Gaussian noise, with
adjacent windows at different levels.  The reference transcript is produced
by a teacher that never looks at the generator: it averages each full
window and buckets the mean uniformly over [-1, 1] into ``V`` classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    num_train: int = 2000
    num_valid: int = 128
    num_test: int = 128
    min_frames: int = 20
    max_frames: int = 60
    feature_dim: int = 8
    vocab_size: int = 16
    noise: float = 0.1


@dataclass
class Utterance:
    feats: np.ndarray  # [frames, feature_dim]
    labels: np.ndarray  # [U], values in 1..V


@dataclass
class Batch:
    feats: np.ndarray  # [B, T_max, F]
    frame_lens: np.ndarray
    labels: np.ndarray  # [B, U_max]
    label_lens: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_lens)


def teacher_labels(feats: np.ndarray, stride: int, vocab_size: int) -> np.ndarray:
    """Bucket each full window's mean into ``vocab_size`` classes (1-based)."""
    n = feats.shape[0] // stride
    means = feats[: n * stride].reshape(n, -1).mean(axis=1)
    cls = np.floor((means + 1.0) / 2.0 * vocab_size).astype(np.int64)
    return np.clip(cls, 0, vocab_size - 1) + 1


def make_utterance(rng: np.random.Generator, cfg: DataConfig, stride: int, constant: float | None = None) -> Utterance:
    frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    n_win = -(-frames // stride)
    V = cfg.vocab_size
    if constant is not None:
        feats = np.full((frames, cfg.feature_dim), constant)
    else:
        cls = np.empty(n_win, dtype=np.int64)
        cls[0] = rng.integers(V)
        for w in range(1, n_win):
            c = rng.integers(V - 1)
            cls[w] = c + (c >= cls[w - 1])
        levels = -1.0 + (cls + 0.5) * (2.0 / V)
        per_frame = np.repeat(levels, stride)[:frames]
        feats = per_frame[:, None] + cfg.noise * rng.normal(size=(frames, cfg.feature_dim))
    return Utterance(feats, teacher_labels(feats, stride, V))


def make_dataset(cfg: DataConfig, split: str, stride: int, constant: float | None = None) -> list[Utterance]:
    count = {"train": cfg.num_train, "valid": cfg.num_valid, "test": cfg.num_test}[split]
    salt = {"train": 1, "valid": 2, "test": 3}[split]
    rng = np.random.default_rng([cfg.seed, salt])
    return [make_utterance(rng, cfg, stride, constant) for _ in range(count)]


def collate(utts: list[Utterance]) -> Batch:
    B = len(utts)
    T = max(u.feats.shape[0] for u in utts)
    U = max(len(u.labels) for u in utts)
    fd = utts[0].feats.shape[1]
    feats = np.zeros((B, T, fd))
    labels = np.ones((B, U), dtype=np.int64)
    for b, u in enumerate(utts):
        feats[b, : u.feats.shape[0]] = u.feats
        labels[b, : len(u.labels)] = u.labels
    return Batch(
        feats,
        np.array([u.feats.shape[0] for u in utts], dtype=np.int64),
        labels,
        np.array([len(u.labels) for u in utts], dtype=np.int64),
    )


def sample_batch(dataset: list[Utterance], size: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(len(dataset), size=size)
    return collate([dataset[i] for i in idx])


def batches(dataset: list[Utterance], size: int):
    for i in range(0, len(dataset), size):
        yield collate(dataset[i : i + size])
