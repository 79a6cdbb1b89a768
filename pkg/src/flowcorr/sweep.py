"""Tolerance sweeps over a full trace set, scored against ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .detector import CandidateSet, ToleranceSchedule, detect_all, preset_schedule
from .evaluator import KPI_NAMES, ConfusionMatrix, KpiSummary, KpiVector, evaluate, fmt3, summarize
from .trace_model import ConnectionId, Flow, natural_key

VICTIM_COLUMN = "Victim"


@dataclass
class SweepResult:
    columns: dict[str, KpiSummary] = field(default_factory=dict)
    victim_detected: dict[str, bool] = field(default_factory=dict)
    rows: list[tuple[str, CandidateSet, ConfusionMatrix, KpiVector]] = field(default_factory=list)

    def detections_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test", "server_conn_id", "n_candidates", "tp", "fp", "tn", "fn", *KPI_NAMES])
        for test, cs, m, k in self.rows:
            w.writerow([
                test, cs.server_conn.name, len(cs.candidates), m.tp, m.fp, m.tn, m.fn,
                *(fmt3(getattr(k, name)) for name in KPI_NAMES),
            ])
        return buf.getvalue()


def run_sweep(
    server_flows: Sequence[Flow],
    client_flows: Sequence[Flow],
    truth: Mapping[ConnectionId, ConnectionId],
    presets: Sequence[str] = ("A", "B", "C", "D", "E"),
    victim: ConnectionId | None = None,
    victim_schedule: ToleranceSchedule | None = None,
    slack: float = 2.0,
    threads: int = 1,
    tol_init: float = 5.0,
    tol_step: float = 1.0,
) -> SweepResult:
    """One KPI column per preset over non-victim connections.

    With a victim, a ``Victim`` column scores the victim's connections under
    ``victim_schedule`` (default: the first preset), and each preset records
    whether every victim connection kept the victim among its candidates.
    """
    schedules = {p.upper(): preset_schedule(p, tol_init, tol_step) for p in presets}
    n_clients = len(client_flows)
    victim_conns = {s for s, c in truth.items() if victim is not None and c == victim}
    out = SweepResult()

    def score(test: str, schedule: ToleranceSchedule, servers: Sequence[Flow]):
        scored = evaluate(detect_all(servers, client_flows, schedule, slack, threads), truth, n_clients)
        out.rows.extend((test, cs, m, k) for cs, m, k in scored)
        return scored

    general = [f for f in server_flows if f.conn not in victim_conns]
    targeted = sorted((f for f in server_flows if f.conn in victim_conns), key=lambda f: natural_key(f.conn.name))
    for name, schedule in schedules.items():
        scored = score(name, schedule, general)
        if scored:
            out.columns[name] = summarize([k for _, _, k in scored])
        if targeted:
            hits = evaluate(detect_all(targeted, client_flows, schedule, slack, threads), truth, n_clients)
            out.victim_detected[name] = bool(hits) and all(m.tp == 1 for _, m, _ in hits)
    if targeted:
        schedule = victim_schedule or next(iter(schedules.values()))
        scored = score(VICTIM_COLUMN, schedule, targeted)
        if scored:
            out.columns[VICTIM_COLUMN] = summarize([k for _, _, k in scored])
        out.victim_detected[VICTIM_COLUMN] = bool(scored) and all(m.tp == 1 for _, m, _ in scored)
    return out
