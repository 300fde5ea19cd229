"""Length pruning of segments to a ``[min_len, max_len]`` window.

Short segments are merged forward until they reach ``min_len``; anything
longer than ``max_len`` is cut and the remainder starts the next segment.
With ``min_len=15, max_len=200`` the lengths ``12, 12, 6, 196, 37`` become
``24, 200, 39``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .core import ConfigError, ContractError, RangeError, Segment
from .formats import group_segments


class TailPolicy(str, Enum):
    DROP = "drop"
    KEEP_FLAGGED = "keep_flagged"


@dataclass(frozen=True)
class PruneConfig:
    min_len: int = 15
    max_len: int = 200
    tail_policy: TailPolicy = TailPolicy.DROP

    def __post_init__(self) -> None:
        object.__setattr__(self, "tail_policy", TailPolicy(self.tail_policy))
        if self.min_len < 1 or self.max_len < 1:
            raise ConfigError("min_len and max_len must be positive")
        if self.min_len > self.max_len:
            raise ConfigError(f"min_len {self.min_len} exceeds max_len {self.max_len}")


@dataclass(frozen=True)
class PruneResult:
    lengths: list[int]
    dropped_tail: int = 0
    undersized_tail: bool = False
    merged_count: int = 0

    def report(self) -> dict:
        return {
            "dropped_tail_steps": self.dropped_tail,
            "emitted": len(self.lengths),
            "merged_count": self.merged_count,
        }


def prune_with_report(lengths: Sequence[int], cfg: PruneConfig) -> PruneResult:
    if not lengths:
        raise ContractError("lengths must be non-empty")
    for x in lengths:
        if x <= 0:
            raise RangeError(f"segment lengths must be positive, got {x}")
    out: list[int] = []
    merged = 0
    acc = 0
    pieces = 0  # input pieces contributing to acc
    for x in lengths:
        acc += x
        pieces += 1
        while acc >= cfg.min_len:
            emit = min(acc, cfg.max_len)
            out.append(emit)
            if pieces > 1:
                merged += 1
            acc -= emit
            # a carried remainder counts as one piece of the next segment
            pieces = 1 if acc else 0
    if acc == 0:
        return PruneResult(out, 0, False, merged)
    if cfg.tail_policy is TailPolicy.KEEP_FLAGGED:
        if pieces > 1:
            merged += 1
        return PruneResult(out + [acc], 0, True, merged)
    return PruneResult(out, acc, False, merged)


def prune_lengths(lengths: Sequence[int], cfg: PruneConfig) -> list[int]:
    return prune_with_report(lengths, cfg).lengths


def _prune_one(segs: list[Segment], cfg: PruneConfig) -> tuple[list[Segment], PruneResult]:
    for a, b in zip(segs, segs[1:]):
        if a.end != b.start:
            raise ContractError(
                f"segments of {a.trajectory_id!r} are not contiguous: [{a.start},{a.end}) then [{b.start},{b.end})"
            )
    res = prune_with_report([s.length for s in segs], cfg)
    reasons = {s.start: s.reason for s in segs}
    out = []
    pos = segs[0].start
    for n in res.lengths:
        out.append(Segment(segs[0].trajectory_id, pos, pos + n, reasons.get(pos)))
        pos += n
    return out, res


def prune_segments(
    segments: Sequence[Segment], cfg: PruneConfig
) -> tuple[list[Segment], PruneResult]:
    """Prune each trajectory's segments independently.

    Returns the pruned segments (grouped by trajectory id) and an aggregate
    :class:`PruneResult` whose ``lengths`` concatenates all outputs.
    """
    out: list[Segment] = []
    lengths: list[int] = []
    dropped = merged = 0
    undersized = False
    for segs in group_segments(segments).values():
        pruned, res = _prune_one(segs, cfg)
        out.extend(pruned)
        lengths.extend(res.lengths)
        dropped += res.dropped_tail
        merged += res.merged_count
        undersized = undersized or res.undersized_tail
    return out, PruneResult(lengths, dropped, undersized, merged)
