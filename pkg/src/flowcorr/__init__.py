"""Traffic-flow fingerprinting and adaptive-tolerance correlation."""

from .detector import (
    CandidateSet,
    Metric,
    StageReport,
    ToleranceSchedule,
    detect,
    detect_all,
    filter_stage,
    preset_schedule,
    similar,
)
from .estimators import FlowCorrelator, FlowFingerprinter
from .evaluator import ConfusionMatrix, KpiSummary, KpiVector, confusion, kpis, summarize
from .flow_stats import EmptyFlowError, FlowStats, TimeFrame, compute_stats, time_slice
from .simulator import Scenario, SimulationResult, preset, simulate
from .trace_model import (
    ConnectionId,
    Direction,
    EndpointTuple,
    Flow,
    PacketRecord,
    Side,
    TraceError,
    load_ground_truth,
    parse_trace,
    write_trace,
)

__version__ = "0.1.0"
