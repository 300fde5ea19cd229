"""JSON Lines readers and writers for trajectories, segments and loss traces."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

from .core import (
    EMPTY_EVENTS,
    BoundarySet,
    ContractError,
    EventSet,
    Reason,
    Segment,
    Step,
    Trajectory,
)


def _dump(obj) -> str:
    return json.dumps(obj, separators=(", ", ": "))


def write_trajectory(traj: Trajectory, fh: IO[str]) -> None:
    fh.write(_dump({"id": traj.id, "obs_vocab": traj.obs_vocab, "act_vocab": traj.act_vocab}) + "\n")
    for s in traj.steps:
        rec = {"t": s.index, "obs": s.obs, "act": s.act, "events": s.events.to_list(), "skill": s.skill}
        fh.write(_dump(rec) + "\n")


def read_trajectory(fh: IO[str] | Iterable[str]) -> Trajectory:
    lines = (ln for ln in fh if ln.strip())
    try:
        header = json.loads(next(lines))
    except StopIteration:
        raise ContractError("trajectory file is empty") from None
    for key in ("id", "obs_vocab", "act_vocab"):
        if key not in header:
            raise ContractError(f"trajectory header missing {key!r}")
    steps = []
    for ln in lines:
        rec = json.loads(ln)
        events = EventSet(rec.get("events") or ()) or EMPTY_EVENTS
        steps.append(Step(int(rec["t"]), int(rec["obs"]), int(rec["act"]), events, rec.get("skill")))
    return Trajectory(str(header["id"]), int(header["obs_vocab"]), int(header["act_vocab"]), tuple(steps))


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_trajectory(traj, fh)


def load_trajectory(path: str | Path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return read_trajectory(fh)


def load_corpus(path: str | Path) -> list[Trajectory]:
    """Load every ``*.jsonl`` trajectory under ``path``, sorted by id.

    ``path`` may be a single file, a directory of trajectory files, or a
    dataset directory containing a ``trajectories/`` subdirectory.
    """
    p = Path(path)
    if p.is_file():
        return [load_trajectory(p)]
    if (p / "trajectories").is_dir():
        p = p / "trajectories"
    files = sorted(p.glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no trajectory files under {path}")
    corpus = [load_trajectory(f) for f in files]
    return sorted(corpus, key=lambda t: t.id)


def save_corpus(corpus: Sequence[Trajectory], directory: str | Path) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for traj in corpus:
        f = d / f"{traj.id}.jsonl"
        save_trajectory(traj, f)
        out.append(f)
    return out


def segment_record(seg: Segment) -> dict:
    return {
        "trajectory_id": seg.trajectory_id,
        "start": seg.start,
        "end": seg.end,
        "reason": seg.reason.value if seg.reason is not None else None,
    }


def write_segments(segments: Iterable[Segment], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seg in segments:
            fh.write(_dump(segment_record(seg)) + "\n")


def read_segments(path: str | Path) -> list[Segment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if not ln.strip():
                continue
            rec = json.loads(ln)
            reason = rec.get("reason")
            out.append(
                Segment(
                    str(rec["trajectory_id"]),
                    int(rec["start"]),
                    int(rec["end"]),
                    Reason(reason) if reason is not None else None,
                )
            )
    return out


def group_segments(segments: Iterable[Segment]) -> dict[str, list[Segment]]:
    """Group segments by trajectory id, each group sorted by start."""
    groups: dict[str, list[Segment]] = defaultdict(list)
    for s in segments:
        groups[s.trajectory_id].append(s)
    return {k: sorted(v, key=lambda s: s.start) for k, v in sorted(groups.items())}


def write_boundaries(sets: Iterable[BoundarySet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for bs in sets:
            rec = {
                "trajectory_id": bs.trajectory_id,
                "boundaries": [
                    {"index": b.index, "reason": b.reason.value if b.reason else None}
                    for b in bs.boundaries
                ],
            }
            fh.write(_dump(rec) + "\n")


def write_loss_trace(losses, boundaries: BoundarySet, path: str | Path) -> None:
    """Write ``{"t", "loss", "boundary", "reason"}`` records, one per step."""
    by_index = {b.index: b for b in boundaries.boundaries}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sl in losses:
            b = by_index.get(sl.index)
            rec = {
                "t": sl.index,
                "loss": sl.loss,
                "boundary": b is not None,
                "reason": b.reason.value if b is not None and b.reason else None,
            }
            fh.write(_dump(rec) + "\n")


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for ln in fh:
            if ln.strip():
                yield json.loads(ln)
