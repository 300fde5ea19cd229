"""Domain types shared across the segmentation pipeline.

A trajectory is an ordered list of steps, each carrying an observation token,
an action token and a (possibly empty) set of event strings.  Boundaries are
step indices at which a new segment opens; segments are half-open ranges
``[start, end)`` so that a boundary step belongs to the segment it opens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class SkillSegError(Exception):
    """Base class for errors raised by this package."""


class RangeError(SkillSegError, ValueError):
    """A value lies outside its permitted range."""


class ConfigError(SkillSegError, ValueError):
    """Inconsistent or invalid configuration."""


class ContractError(SkillSegError, ValueError):
    """An input violates the precondition of an operation."""


class Reason(str, Enum):
    """Why a boundary was declared."""

    LOSS = "loss"
    EVENT = "event"
    BOTH = "both"

    @classmethod
    def combine(cls, by_loss: bool, by_event: bool) -> "Reason | None":
        if by_loss and by_event:
            return cls.BOTH
        if by_loss:
            return cls.LOSS
        if by_event:
            return cls.EVENT
        return None


class EventSet(frozenset):
    """Unordered set of ``"category:item"`` event strings."""

    def __new__(cls, events: Iterable[str] = ()):
        return super().__new__(cls, (str(e) for e in events))

    def __repr__(self) -> str:
        return f"EventSet({sorted(self)!r})"

    def categories(self) -> set[str]:
        return {e.split(":", 1)[0] for e in self}

    def has_category(self, category: str) -> bool:
        return any(e.split(":", 1)[0] == category for e in self)

    def to_list(self) -> list[str]:
        return sorted(self)


EMPTY_EVENTS = EventSet()


@dataclass(frozen=True, slots=True)
class Step:
    index: int
    obs: int
    act: int
    events: EventSet = EMPTY_EVENTS
    skill: int | None = None


@dataclass(frozen=True)
class Trajectory:
    """An observation-action sequence with vocabulary sizes.

    Construction does not validate; use :func:`validate_trajectory` to get a
    report of every violation.
    """

    id: str
    obs_vocab: int
    act_vocab: int
    steps: tuple[Step, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.steps, tuple):
            object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def from_arrays(
        cls,
        id: str,
        obs: Sequence[int],
        acts: Sequence[int],
        obs_vocab: int,
        act_vocab: int,
        events: Sequence[Iterable[str]] | None = None,
        skills: Sequence[int] | None = None,
    ) -> "Trajectory":
        if len(obs) != len(acts):
            raise ContractError("obs and acts must have equal length")
        steps = []
        for i, (o, a) in enumerate(zip(obs, acts)):
            ev = EventSet(events[i]) if events is not None and events[i] else EMPTY_EVENTS
            sk = int(skills[i]) if skills is not None else None
            steps.append(Step(i, int(o), int(a), ev, sk))
        return cls(id, int(obs_vocab), int(act_vocab), tuple(steps))

    @cached_property
    def obs(self) -> np.ndarray:
        return np.fromiter((s.obs for s in self.steps), dtype=np.int64, count=len(self.steps))

    @cached_property
    def acts(self) -> np.ndarray:
        return np.fromiter((s.act for s in self.steps), dtype=np.int64, count=len(self.steps))

    @property
    def skills(self) -> list[int | None]:
        return [s.skill for s in self.steps]

    @property
    def has_events(self) -> bool:
        return any(s.events for s in self.steps)


@dataclass(frozen=True, slots=True)
class Boundary:
    index: int
    reason: Reason | None = None


@dataclass(frozen=True)
class BoundarySet:
    trajectory_id: str
    boundaries: tuple[Boundary, ...] = ()

    def __post_init__(self) -> None:
        bs = tuple(self.boundaries)
        object.__setattr__(self, "boundaries", bs)
        for prev, cur in zip(bs, bs[1:]):
            if cur.index <= prev.index:
                raise ContractError(
                    f"boundary indices must be strictly increasing, got {prev.index} then {cur.index}"
                )
        if bs and bs[0].index <= 0:
            raise RangeError(f"boundary index must be > 0, got {bs[0].index}")

    @classmethod
    def from_indices(
        cls, trajectory_id: str, indices: Iterable[int], reason: Reason | None = None
    ) -> "BoundarySet":
        return cls(trajectory_id, tuple(Boundary(int(i), reason) for i in sorted(set(indices))))

    @property
    def indices(self) -> list[int]:
        return [b.index for b in self.boundaries]

    def __len__(self) -> int:
        return len(self.boundaries)


@dataclass(frozen=True, slots=True)
class Segment:
    trajectory_id: str
    start: int
    end: int
    reason: Reason | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.start < self.end:
            raise RangeError(f"invalid segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class DetectorConfig:
    """Settings for the streaming boundary detector.

    ``gap`` is in nats and has no default: loss scales differ between
    predictors, so callers pick it explicitly or calibrate it.
    """

    gap: float
    window: int = 128
    min_event_offset: int = 16
    use_loss: bool = True
    use_events: bool = True

    def __post_init__(self) -> None:
        if not (self.use_loss or self.use_events):
            raise ConfigError("at least one of use_loss, use_events must be enabled")
        if math.isnan(self.gap) or self.gap < 0:
            raise ConfigError(f"gap must be >= 0, got {self.gap}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.min_event_offset < 0:
            raise ConfigError(f"min_event_offset must be >= 0, got {self.min_event_offset}")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_trajectory(t: Trajectory) -> ValidationReport:
    problems: list[str] = []
    if t.obs_vocab < 1:
        problems.append(f"obs_vocab must be positive, got {t.obs_vocab}")
    if t.act_vocab < 1:
        problems.append(f"act_vocab must be positive, got {t.act_vocab}")
    if not t.steps:
        problems.append("empty trajectory")
    for pos, s in enumerate(t.steps):
        if s.index != pos:
            problems.append(f"step {pos}: index gap (recorded index {s.index})")
        if not 0 <= s.obs < t.obs_vocab:
            problems.append(f"step {pos}: obs {s.obs} outside [0, {t.obs_vocab})")
        if not 0 <= s.act < t.act_vocab:
            problems.append(f"step {pos}: act {s.act} outside [0, {t.act_vocab})")
    return ValidationReport(tuple(problems))


def segments_from_boundaries(traj_len: int, b: BoundarySet) -> list[Segment]:
    """Partition ``[0, traj_len)`` at the boundary indices.

    Each segment after the first carries the reason of the boundary that
    opened it.
    """
    if traj_len < 1:
        raise RangeError(f"traj_len must be positive, got {traj_len}")
    for bd in b.boundaries:
        if not 0 < bd.index < traj_len:
            raise RangeError(f"boundary {bd.index} outside (0, {traj_len})")
    starts = [0] + [bd.index for bd in b.boundaries]
    reasons = [None] + [bd.reason for bd in b.boundaries]
    ends = starts[1:] + [traj_len]
    return [Segment(b.trajectory_id, s, e, r) for s, e, r in zip(starts, ends, reasons)]


def boundaries_from_segments(segments: Sequence[Segment]) -> BoundarySet:
    """Inverse of :func:`segments_from_boundaries` for one trajectory."""
    if not segments:
        raise ContractError("no segments")
    tid = segments[0].trajectory_id
    ordered = sorted(segments, key=lambda s: s.start)
    return BoundarySet(tid, tuple(Boundary(s.start, s.reason) for s in ordered if s.start > 0))
