"""Streaming skill-boundary detection.

A step opens a new segment when its predictive loss exceeds the mean loss of
the current segment (the current loss included) by more than ``gap``, or
when an external indicator flags it.  After a boundary the predictor's
context is cleared and the boundary step becomes the first context element
of the new segment.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .core import (
    Boundary,
    BoundarySet,
    ConfigError,
    DetectorConfig,
    Reason,
    Segment,
    Trajectory,
    segments_from_boundaries,
)
from .predictor import PredictorModel, StepLoss, step_loss

KILL_CATEGORY = "kill_entity"


@dataclass(frozen=True)
class IndicatorTrack:
    flags: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.flags)

    @classmethod
    def empty(cls, n: int) -> "IndicatorTrack":
        return cls((False,) * n)

    @classmethod
    def from_indices(cls, n: int, indices) -> "IndicatorTrack":
        idx = set(indices)
        return cls(tuple(i in idx for i in range(n)))

    @property
    def indices(self) -> list[int]:
        return [i for i, f in enumerate(self.flags) if f]


def mark_event_indicators(t: Trajectory, kill_offset: int = 16) -> IndicatorTrack:
    """Flag the last step of every run of identical non-empty event sets.

    A flagged step whose events include a ``kill_entity`` event is moved
    ``kill_offset`` steps later (clamped to the final step) so that the
    aftermath of the kill stays inside the same segment.
    """
    if kill_offset < 0:
        raise ConfigError(f"kill_offset must be >= 0, got {kill_offset}")
    n = len(t.steps)
    flags = [False] * n
    for i, step in enumerate(t.steps):
        ev = step.events
        if not ev:
            continue
        if i + 1 < n and t.steps[i + 1].events == ev:
            continue
        j = min(i + kill_offset, n - 1) if ev.has_category(KILL_CATEGORY) else i
        flags[j] = True
    return IndicatorTrack(tuple(flags))


@dataclass
class DetectorState:
    begin: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0

    def push(self, loss: float) -> float:
        """Record ``loss`` and return the mean of the segment so far."""
        self.loss_sum += loss
        self.loss_count += 1
        return self.loss_sum / self.loss_count

    def restart(self, t: int) -> None:
        self.begin = t
        self.loss_sum = 0.0
        self.loss_count = 0


def detect_boundaries(
    t: Trajectory,
    model: PredictorModel,
    cfg: DetectorConfig,
    indicators: IndicatorTrack | None = None,
) -> tuple[BoundarySet, list[StepLoss]]:
    """Run the detector over one trajectory.

    The caller's ``model`` is not mutated; a private inference context capped
    at ``cfg.window`` steps is spawned from it.  Returns the boundaries and
    the per-step loss trace.  Step 0 already opens a segment, so a flag there
    is ignored.
    """
    n = len(t.steps)
    if indicators is None:
        indicators = IndicatorTrack.empty(n)
    if len(indicators) != n:
        raise ConfigError(f"indicator track has length {len(indicators)}, trajectory has {n}")
    ctx = model.spawn(window=cfg.window)
    ctx.reset()
    state = DetectorState()
    flags = indicators.flags
    obs = t.obs.tolist()
    acts = t.acts.tolist()
    losses: list[StepLoss] = []
    found: list[Boundary] = []
    for i in range(n):
        sl = step_loss(ctx, obs[i], acts[i], i)
        losses.append(sl)
        mean = state.push(sl.loss)
        by_loss = cfg.use_loss and sl.loss - mean > cfg.gap
        by_event = cfg.use_events and flags[i]
        if i > 0 and (by_loss or by_event):
            found.append(Boundary(i, Reason.combine(by_loss, by_event)))
            state.restart(i)
            ctx.reset()
        ctx.observe(obs[i], acts[i])
    return BoundarySet(t.id, tuple(found)), losses


def loss_excesses(t: Trajectory, model: PredictorModel, window: int = 128) -> np.ndarray:
    """Per-step ``loss - running mean`` with the detector never firing."""
    cfg = DetectorConfig(gap=math.inf, window=window, use_loss=True, use_events=False)
    _, losses = detect_boundaries(t, model, cfg)
    out = np.empty(len(losses))
    total = 0.0
    for i, sl in enumerate(losses):
        total += sl.loss
        out[i] = sl.loss - total / (i + 1)
    return out


@dataclass(frozen=True)
class TrajectoryResult:
    boundaries: BoundarySet
    losses: list[StepLoss]
    segments: list[Segment]


def _segment_one(traj: Trajectory, model: PredictorModel, cfg: DetectorConfig) -> TrajectoryResult:
    ind = mark_event_indicators(traj, cfg.min_event_offset) if cfg.use_events else None
    bs, losses = detect_boundaries(traj, model, cfg, ind)
    return TrajectoryResult(bs, losses, segments_from_boundaries(len(traj), bs))


def segment_corpus(
    corpus: Sequence[Trajectory],
    model: PredictorModel,
    cfg: DetectorConfig,
    workers: int = 1,
) -> list[TrajectoryResult]:
    """Detect boundaries in every trajectory independently.

    Results are returned in corpus order regardless of ``workers``.
    """
    fn = partial(_segment_one, model=model, cfg=cfg)
    if workers <= 1 or len(corpus) < 2:
        return [fn(traj) for traj in corpus]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, corpus, chunksize=max(1, len(corpus) // (4 * workers))))
