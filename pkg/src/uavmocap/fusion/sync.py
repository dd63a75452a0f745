"""Shutter-timestamp pairing of two camera streams."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from ..errors import ValidationError

NS_PER_MS = 1_000_000
DEFAULT_TOLERANCE_MS = 12.5  # half the 40 fps frame period


@dataclass(frozen=True)
class TimedFrame:
    agent_id: int
    shutter_timestamp: int  # nanoseconds on the agent's clock
    payload: Any = None


@dataclass
class DropLog:
    """Frames that found no partner within tolerance, as (agent_id, index, timestamp)."""

    unmatched: list = field(default_factory=list)

    def count(self, agent_id=None) -> int:
        if agent_id is None:
            return len(self.unmatched)
        return sum(1 for a, _, _ in self.unmatched if a == agent_id)


def _check_monotone(stream):
    for prev, cur in zip(stream, stream[1:]):
        if cur.shutter_timestamp < prev.shutter_timestamp:
            raise ValidationError("shutter timestamps must be nondecreasing per stream")


def match_frames(stream_a, stream_b, tolerance_ms: float = DEFAULT_TOLERANCE_MS):
    """Greedy nearest-timestamp pairing.

    Candidate pairs within ``tolerance_ms`` (inclusive) are accepted in order
    of increasing time difference, each frame at most once. Returns the pairs
    ``(frame_a, frame_b)`` sorted by the first stream's timestamp and a
    :class:`DropLog` of the leftovers.
    """
    stream_a, stream_b = list(stream_a), list(stream_b)
    _check_monotone(stream_a)
    _check_monotone(stream_b)
    tol = tolerance_ms * NS_PER_MS
    candidates = []
    lo = 0
    for i, fa in enumerate(stream_a):
        ta = fa.shutter_timestamp
        while lo < len(stream_b) and stream_b[lo].shutter_timestamp < ta - tol:
            lo += 1
        j = lo
        while j < len(stream_b) and stream_b[j].shutter_timestamp <= ta + tol:
            candidates.append((abs(stream_b[j].shutter_timestamp - ta), i, j))
            j += 1
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    log = DropLog()
    for i, f in enumerate(stream_a):
        if i not in used_a:
            log.unmatched.append((f.agent_id, i, f.shutter_timestamp))
    for j, f in enumerate(stream_b):
        if j not in used_b:
            log.unmatched.append((f.agent_id, j, f.shutter_timestamp))
    return [(stream_a[i], stream_b[j]) for i, j in pairs], log
