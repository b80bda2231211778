"""Block processing of utterances and dual-mode segment-length sampling.

An utterance of ``T`` frames is cut into consecutive center blocks of
``C`` frames.  Each center block sees up to ``L`` frames of left context and
``R`` frames of look-ahead.  Full-context operation is the degenerate case
``C >= T`` with ``R = 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError


class Segment(NamedTuple):
    center_start: int
    center_end: int
    left_start: int
    right_end: int


@dataclass(frozen=True)
class SegmentLayout:
    T: int
    C: int
    L: int
    R: int
    segments: tuple[Segment, ...]

    @property
    def is_full_context(self) -> bool:
        return len(self.segments) == 1 and self.R == 0

    def to_json(self) -> str:
        return json.dumps([s._asdict() for s in self.segments])


def segment(T: int, C: int, L: int, R: int) -> SegmentLayout:
    """Cut ``T`` frames into ``ceil(T / C)`` contextual segments."""
    if T < 1:
        raise DimensionError("cannot segment an empty utterance")
    if C < 1 or L < 0 or R < 0:
        raise ValueError(f"invalid segment geometry C={C} L={L} R={R}")
    segs = []
    for start in range(0, T, C):
        end = min(T, start + C)
        segs.append(Segment(start, end, max(0, start - L), min(T, end + R)))
    return SegmentLayout(T, C, L, R, tuple(segs))


def attention_allow(layout: SegmentLayout) -> np.ndarray:
    """[T, T] boolean: query ``q`` may attend key ``k`` within q's contextual segment."""
    allow = np.zeros((layout.T, layout.T), dtype=bool)
    for s in layout.segments:
        allow[s.center_start : s.center_end, s.left_start : s.right_end] = True
    return allow


class ContextPlan(NamedTuple):
    """Attention plan with look-ahead frames duplicated per segment.

    The encoder runs over ``T + n_copies`` positions: the utterance itself
    followed by one private copy of every segment's right-context frames.
    Center frames attend their left context and own center on the utterance
    track and their look-ahead on their private copies, so the look-ahead
    never widens with depth.
    """

    source: np.ndarray  # [T + n_copies] frame index each position reads at the input
    allow: np.ndarray  # [T + n_copies, T + n_copies]
    positions: np.ndarray  # [T + n_copies] time index used for relative positions


def context_plan(layout: SegmentLayout) -> ContextPlan:
    T = layout.T
    copies: list[tuple[int, range]] = []
    n = T
    for s in layout.segments:
        look = range(s.center_end, s.right_end)
        copies.append((n, look))
        n += len(look)
    source = np.empty(n, dtype=np.int64)
    source[:T] = np.arange(T)
    allow = np.zeros((n, n), dtype=bool)
    for s, (off, look) in zip(layout.segments, copies):
        source[off : off + len(look)] = np.fromiter(look, dtype=np.int64, count=len(look))
        rows = np.r_[s.center_start : s.center_end, off : off + len(look)]
        cols = np.r_[s.left_start : s.center_end, off : off + len(look)]
        allow[np.ix_(rows, cols)] = True
    return ContextPlan(source, allow, source.copy())


@dataclass(frozen=True)
class Mode:
    """Operating point of one forward pass."""

    streaming: bool
    center: int

    @property
    def name(self) -> str:
        return "streaming" if self.streaming else "nonstreaming"


@dataclass(frozen=True)
class ModeSampler:
    """Two-point distribution over the center length: tau0 (streaming) or tau1 (full)."""

    tau0: int = 3
    tau1: int = 1000
    left: int = 20
    right: int = 1

    def __post_init__(self):
        if self.tau0 < 1 or self.tau1 < self.tau0:
            raise ValueError(f"need 1 <= tau0 <= tau1, got {self.tau0}, {self.tau1}")

    def streaming(self) -> Mode:
        return Mode(True, self.tau0)

    def full(self) -> Mode:
        return Mode(False, self.tau1)

    def layout(self, T: int, mode: Mode) -> SegmentLayout:
        if mode.streaming:
            return segment(T, mode.center, self.left, self.right)
        if mode.center < T:
            raise DimensionError(f"full-context center {mode.center} shorter than utterance {T}")
        return segment(T, mode.center, self.left, 0)


def sample_mode(sampler: ModeSampler, rng: np.random.Generator) -> Mode:
    return sampler.streaming() if rng.random() < 0.5 else sampler.full()


def num_segments(T: int, C: int) -> int:
    return math.ceil(T / C)
