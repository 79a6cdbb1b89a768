"""Confusion matrices and binary-classification KPIs for detection attempts.

Each detection attempt has exactly one true client among ``n`` observed
clients, so ``t == 1`` and ``nt == n - 1``. KPIs are kept as exact fractions;
``ppv``/``npv`` are ``None`` when their denominator is zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .detector import CandidateSet
from .trace_model import ConnectionId, Side

KPI_NAMES = ("se", "sp", "fpr", "fnr", "ppv", "npv")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int
    nt: int
    t: int = 1

    def __post_init__(self):
        if self.tp not in (0, 1) or self.tp + self.fn != self.t or self.t != 1:
            raise EvaluationError(f"invalid target counts tp={self.tp} fn={self.fn}")
        if min(self.fp, self.tn) < 0 or self.fp + self.tn != self.nt:
            raise EvaluationError(f"invalid non-target counts fp={self.fp} tn={self.tn} nt={self.nt}")


@dataclass(frozen=True)
class KpiVector:
    se: Fraction
    sp: Fraction | None
    fpr: Fraction | None
    fnr: Fraction
    ppv: Fraction | None
    npv: Fraction | None

    def as_dict(self) -> dict[str, Fraction | None]:
        return {k: getattr(self, k) for k in KPI_NAMES}


@dataclass(frozen=True)
class KpiStat:
    mean: float | None
    std: float | None
    excluded: int = 0

    def render(self) -> str:
        if self.mean is None:
            return "n/a"
        return f"{self.mean:.3f}±{self.std:.3f}"


@dataclass(frozen=True)
class KpiSummary:
    count: int
    stats: dict[str, KpiStat]

    def __getitem__(self, kpi: str) -> KpiStat:
        return self.stats[kpi]


def confusion(candidates: CandidateSet | Iterable[ConnectionId], truth: ConnectionId, n_clients: int) -> ConfusionMatrix:
    if n_clients < 1:
        raise EvaluationError("n_clients must be >= 1")
    if truth.side is not Side.CLIENT:
        raise EvaluationError(f"truth {truth} is not a client-side connection")
    found = candidates.candidates if isinstance(candidates, CandidateSet) else frozenset(candidates)
    tp = int(truth in found)
    fp = len(found) - tp
    nt = n_clients - 1
    if fp > nt:
        raise EvaluationError(
            f"{fp} false positives exceed {nt} non-targets; candidates do not match the client set"
        )
    return ConfusionMatrix(tp=tp, fn=1 - tp, fp=fp, tn=nt - fp, nt=nt)


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def kpis(m: ConfusionMatrix) -> KpiVector:
    return KpiVector(
        se=Fraction(m.tp, m.t),
        sp=_ratio(m.tn, m.nt),
        fpr=_ratio(m.fp, m.nt),
        fnr=Fraction(m.fn, m.t),
        ppv=_ratio(m.tp, m.tp + m.fp),
        npv=_ratio(m.tn, m.fn + m.tn),
    )


def summarize(vectors: Sequence[KpiVector]) -> KpiSummary:
    """Per-KPI mean and population standard deviation; undefined values are skipped."""
    if not vectors:
        raise EvaluationError("cannot summarise an empty list of KPI vectors")
    stats = {}
    for name in KPI_NAMES:
        values = [float(v) for v in (getattr(vec, name) for vec in vectors) if v is not None]
        excluded = len(vectors) - len(values)
        if not values:
            stats[name] = KpiStat(None, None, excluded)
            continue
        mean = math.fsum(values) / len(values)
        var = math.fsum((x - mean) ** 2 for x in values) / len(values)
        stats[name] = KpiStat(mean, math.sqrt(var), excluded)
    return KpiSummary(len(vectors), stats)


def evaluate(
    results: Sequence[CandidateSet],
    truth: Mapping[ConnectionId, ConnectionId],
    n_clients: int,
) -> list[tuple[CandidateSet, ConfusionMatrix, KpiVector]]:
    """Score detections that have a ground-truth entry and no error."""
    scored = []
    for cs in results:
        if cs.error is not None or cs.server_conn not in truth:
            continue
        m = confusion(cs, truth[cs.server_conn], n_clients)
        scored.append((cs, m, kpis(m)))
    return scored


def fmt3(value: Fraction | float | None) -> str:
    return "n/a" if value is None else f"{float(value):.3f}"


def render_table(
    columns: Mapping[str, KpiSummary | KpiVector],
    victim_detected: Mapping[str, bool] | None = None,
) -> str:
    """Aligned text table: one row per KPI, one column per test."""
    names = list(columns)
    rows = [["KPI", *names]]
    for kpi in KPI_NAMES:
        row = [kpi]
        for name in names:
            col = columns[name]
            if isinstance(col, KpiSummary):
                row.append(col[kpi].render())
            else:
                row.append(fmt3(getattr(col, kpi)))
        rows.append(row)
    if victim_detected:
        rows.append(["Victim Detected", *(_tf(victim_detected[n]) if n in victim_detected else "" for n in names)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    if victim_detected:
        lines.extend(f"{n} victim_detected: {_tf(v)}" for n, v in victim_detected.items())
    return "\n".join(lines) + "\n"


def render_csv(
    columns: Mapping[str, KpiSummary | KpiVector],
    victim_detected: Mapping[str, bool] | None = None,
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["test", "kpi", "mean", "std", "excluded", "count"])
    for name, col in columns.items():
        for kpi in KPI_NAMES:
            if isinstance(col, KpiSummary):
                s = col[kpi]
                writer.writerow([name, kpi, fmt3(s.mean), fmt3(s.std), s.excluded, col.count])
            else:
                v = getattr(col, kpi)
                writer.writerow([name, kpi, fmt3(v), fmt3(0.0 if v is not None else None), int(v is None), 1])
    for name, flag in (victim_detected or {}).items():
        writer.writerow([name, "victim_detected", _tf(flag), "", "", ""])
    return buf.getvalue()


def _tf(flag: bool) -> str:
    return "true" if flag else "false"
