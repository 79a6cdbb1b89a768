"""Four-metric connection fingerprints and time slicing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trace_model import Direction, Flow

DEFAULT_SLACK = 2.0


class EmptyFlowError(ValueError):
    """The flow has no packets in the requested direction."""


@dataclass(frozen=True)
class TimeFrame:
    start: float
    end: float

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"time frame start {self.start} after end {self.end}")

    def widened(self, slack: float) -> TimeFrame:
        return TimeFrame(self.start - slack, self.end + slack)


@dataclass(frozen=True)
class FlowStats:
    """Connection fingerprint.

    ``tp`` packet count, ``at`` mean gap between successive packets,
    ``td`` total bytes, ``tt`` duration; ``frame`` spans first to last packet.
    """

    tp: int
    at: float
    td: int
    tt: float
    frame: TimeFrame

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def as_tuple(self) -> tuple[int, float, int, float]:
        return (self.tp, self.at, self.td, self.tt)


def stats_from_arrays(timestamps: np.ndarray, sizes: np.ndarray) -> FlowStats:
    """Fingerprint of already-filtered, time-ordered packets."""
    tp = len(timestamps)
    if tp == 0:
        raise EmptyFlowError("no packets to fingerprint")
    start, end = float(timestamps[0]), float(timestamps[-1])
    tt = end - start if tp > 1 else 0.0
    at = tt / (tp - 1) if tp > 1 else 0.0
    return FlowStats(tp=tp, at=at, td=int(sizes.sum()), tt=tt, frame=TimeFrame(start, end))


def compute_stats(flow: Flow, direction: Direction = Direction.DOWN) -> FlowStats:
    mask = flow.downstream if direction is Direction.DOWN else ~flow.downstream
    if not mask.any():
        raise EmptyFlowError(f"flow {flow.conn} has no {direction.value}stream packets")
    ts = flow.timestamps[mask]
    # Flow guarantees ordering, but stats must not depend on it.
    order = np.argsort(ts, kind="stable")
    return stats_from_arrays(ts[order], flow.sizes[mask][order])


def time_slice(flow: Flow, frame: TimeFrame, slack: float = DEFAULT_SLACK) -> Flow:
    """Packets with timestamp inside ``frame`` widened by ``slack`` on both ends."""
    if slack < 0:
        raise ValueError("slack must be non-negative")
    lo, hi = _slice_bounds(flow, frame, slack)
    return Flow(flow.conn, flow.packets[lo:hi])


def sliced_stats(
    flow: Flow,
    frame: TimeFrame,
    slack: float = DEFAULT_SLACK,
    direction: Direction = Direction.DOWN,
) -> FlowStats | None:
    """Equivalent to ``compute_stats(time_slice(flow, frame, slack), direction)``
    without materialising the slice; ``None`` when the slice has no matching packets."""
    lo, hi = _slice_bounds(flow, frame, slack)
    mask = flow.downstream[lo:hi]
    if direction is Direction.UP:
        mask = ~mask
    if not mask.any():
        return None
    return stats_from_arrays(flow.timestamps[lo:hi][mask], flow.sizes[lo:hi][mask])


def _slice_bounds(flow: Flow, frame: TimeFrame, slack: float) -> tuple[int, int]:
    ts = flow.timestamps
    lo = int(np.searchsorted(ts, frame.start - slack, side="left"))
    hi = int(np.searchsorted(ts, frame.end + slack, side="right"))
    return lo, hi
