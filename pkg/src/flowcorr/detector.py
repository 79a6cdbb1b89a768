"""Cascading adaptive-tolerance reduction of client connections.

A server-side fingerprint anchors the search. Client flows are first restricted
to the server connection's time frame (plus slack), re-fingerprinted over the
sliced packets, then filtered by packet count, mean gap, total data and total
time in that order. Each filter starts at the initial tolerance and widens by
the increment until something survives or the stage maximum is passed, at
which point detection stops with no candidates.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .flow_stats import DEFAULT_SLACK, EmptyFlowError, FlowStats, compute_stats, sliced_stats
from .trace_model import ConnectionId, Flow

log = logging.getLogger(__name__)

ZERO_EPSILON = 1e-9
# Tolerances are rebuilt as initial + k * increment and rounded so that
# decimal schedules (0.05, 0.06, ...) land exactly on their stage maxima.
_TOL_DIGITS = 12


class Metric(enum.Enum):
    TIME_FRAME = "frame"
    PACKET_COUNT = "tp"
    AVG_GAP = "at"
    TOTAL_DATA = "td"
    TOTAL_TIME = "tt"


FILTER_ORDER = (Metric.PACKET_COUNT, Metric.AVG_GAP, Metric.TOTAL_DATA, Metric.TOTAL_TIME)


@dataclass(frozen=True)
class ToleranceSchedule:
    """Relative tolerance bands, as fractions (0.05 == 5%)."""

    max_tp: float
    max_at: float
    max_td: float
    max_tt: float
    initial: float = 0.05
    increment: float = 0.01

    def __post_init__(self):
        if not self.increment > 0:
            raise ValueError("increment must be positive")
        if self.initial < 0:
            raise ValueError("initial tolerance must be non-negative")
        for name in ("max_tp", "max_at", "max_td", "max_tt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_percent(cls, tp, at, td, tt, initial=5.0, increment=1.0) -> ToleranceSchedule:
        return cls(tp / 100, at / 100, td / 100, tt / 100, initial / 100, increment / 100)

    def maximum(self, metric: Metric) -> float:
        return getattr(self, f"max_{metric.value}")

    def tolerances(self, metric: Metric):
        """Escalation sequence for one stage: the start clamps to the stage max."""
        # Compare at the same rounding as the emitted values so a max that is
        # not a multiple of the step is still reachable.
        top = round(self.maximum(metric), _TOL_DIGITS)
        start = min(self.initial, top)
        k = 0
        while True:
            tol = round(start + k * self.increment, _TOL_DIGITS)
            if tol > top:
                return
            yield tol
            k += 1


# Maximum tolerances (tp, at, td, tt) in percent for the five named sweeps.
PRESETS: dict[str, tuple[float, float, float, float]] = {
    "A": (52, 32, 2, 1),
    "B": (100, 50, 25, 5),
    "C": (50, 50, 25, 5),
    "D": (50, 50, 10, 5),
    "E": (25, 25, 5, 1),
}


def preset_schedule(name: str, initial: float = 5.0, increment: float = 1.0) -> ToleranceSchedule:
    try:
        maxima = PRESETS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown tolerance preset {name!r}; choose from {', '.join(PRESETS)}")
    return ToleranceSchedule.from_percent(*maxima, initial=initial, increment=increment)


@dataclass(frozen=True)
class StageReport:
    metric: Metric
    final_tolerance: float
    survivors: int
    exhausted: bool
    evaluations: int = 0  # calls to similar() made by this stage
    members: frozenset[ConnectionId] = field(default=frozenset(), compare=False, repr=False)


@dataclass(frozen=True)
class CandidateSet:
    server_conn: ConnectionId
    candidates: frozenset[ConnectionId]
    stages: tuple[StageReport, ...] = ()
    error: str | None = None

    @property
    def evaluations(self) -> int:
        return sum(s.evaluations for s in self.stages)

    @property
    def stopped_at(self) -> Metric | None:
        for s in self.stages:
            if s.exhausted:
                return s.metric
        return None


def similar(candidate_value: float, reference_value: float, tolerance: float) -> bool:
    if reference_value == 0:
        return candidate_value <= ZERO_EPSILON
    return abs(candidate_value - reference_value) <= tolerance * reference_value


def filter_stage(
    pool: Sequence[tuple[ConnectionId, FlowStats]],
    reference: FlowStats,
    metric: Metric,
    schedule: ToleranceSchedule,
) -> tuple[list[tuple[ConnectionId, FlowStats]], StageReport]:
    ref = reference.metric(metric.value)
    evaluations = 0
    tol = min(schedule.initial, schedule.maximum(metric))
    for tol in schedule.tolerances(metric):
        survivors = [
            entry for entry in pool if similar(entry[1].metric(metric.value), ref, tol)
        ]
        evaluations += len(pool)
        if survivors:
            members = frozenset(conn for conn, _ in survivors)
            return survivors, StageReport(metric, tol, len(survivors), False, evaluations, members)
        if not pool:
            break
    return [], StageReport(metric, tol, 0, True, evaluations)


def detect(
    server_flow: Flow,
    client_flows: Sequence[Flow],
    schedule: ToleranceSchedule,
    slack: float = DEFAULT_SLACK,
) -> CandidateSet:
    reference = compute_stats(server_flow)
    pool = []
    for flow in client_flows:
        stats = sliced_stats(flow, reference.frame, slack)
        if stats is not None:
            pool.append((flow.conn, stats))
    stages = [
        StageReport(Metric.TIME_FRAME, 0.0, len(pool), not pool, members=frozenset(c for c, _ in pool))
    ]
    if pool:
        for metric in FILTER_ORDER:
            pool, report = filter_stage(pool, reference, metric, schedule)
            stages.append(report)
            if report.exhausted:
                break
    return CandidateSet(
        server_flow.conn, frozenset(conn for conn, _ in pool), tuple(stages)
    )


def detect_all(
    server_flows: Sequence[Flow],
    client_flows: Sequence[Flow],
    schedule: ToleranceSchedule,
    slack: float = DEFAULT_SLACK,
    threads: int = 1,
) -> list[CandidateSet]:
    """Run :func:`detect` for every server flow, preserving input order.

    Server flows without downstream packets yield a CandidateSet carrying
    the error message instead of aborting the batch.
    """

    def one(flow: Flow) -> CandidateSet:
        try:
            return detect(flow, client_flows, schedule, slack)
        except EmptyFlowError as exc:
            log.warning("skipping %s: %s", flow.conn, exc)
            return CandidateSet(flow.conn, frozenset(), error=str(exc))

    if threads <= 1:
        return [one(f) for f in server_flows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, server_flows))
