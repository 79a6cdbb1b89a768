"""scikit-learn compatible wrappers around fingerprinting and detection.

``FlowFingerprinter`` turns flows into an ``(n, 4)`` feature matrix of
``tp, at, td, tt``. ``FlowCorrelator`` is fitted on the client-side pool and
predicts candidate sets for server-side flows::

    corr = FlowCorrelator.from_preset("B").fit(client_flows)
    candidates = corr.predict(server_flows)
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detector import PRESETS, CandidateSet, ToleranceSchedule, detect_all
from .flow_stats import DEFAULT_SLACK, compute_stats
from .trace_model import ConnectionId, Direction, Flow, Side

FEATURE_NAMES = np.array(["tp", "at", "td", "tt"], dtype=object)


def check_flows(X, side: Side | None = None) -> list[Flow]:
    """Validate a flow collection; returns it as a list."""
    if isinstance(X, Flow):
        raise TypeError("expected a sequence of Flow objects, got a single Flow")
    flows = list(X)
    for i, f in enumerate(flows):
        if not isinstance(f, Flow):
            raise TypeError(f"element {i} is {type(f).__name__}, expected Flow")
        if side is not None and f.conn.side is not side:
            raise ValueError(f"flow {f.conn} is not a {side.name.lower()}-side connection")
    return flows


class FlowFingerprinter(TransformerMixin, BaseEstimator):
    def __init__(self, direction: str = "down"):
        self.direction = direction

    def fit(self, X, y=None):
        check_flows(X)
        Direction(self.direction)
        self.n_features_in_ = 4
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        direction = Direction(self.direction)
        rows = [compute_stats(f, direction).as_tuple() for f in check_flows(X)]
        return np.asarray(rows, dtype=float).reshape(-1, 4)

    def get_feature_names_out(self, input_features=None):
        return FEATURE_NAMES.copy()


class FlowCorrelator(BaseEstimator):
    """Adaptive-tolerance correlator; tolerances are fractions (0.05 == 5%)."""

    def __init__(
        self,
        max_tp: float = 1.0,
        max_at: float = 0.5,
        max_td: float = 0.25,
        max_tt: float = 0.05,
        tol_init: float = 0.05,
        tol_step: float = 0.01,
        slack: float = DEFAULT_SLACK,
        n_jobs: int = 1,
    ):
        self.max_tp = max_tp
        self.max_at = max_at
        self.max_td = max_td
        self.max_tt = max_tt
        self.tol_init = tol_init
        self.tol_step = tol_step
        self.slack = slack
        self.n_jobs = n_jobs

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> FlowCorrelator:
        tp, at, td, tt = (v / 100 for v in PRESETS[name.upper()])
        return cls(max_tp=tp, max_at=at, max_td=td, max_tt=tt, **kwargs)

    @property
    def schedule(self) -> ToleranceSchedule:
        return ToleranceSchedule(
            self.max_tp, self.max_at, self.max_td, self.max_tt, self.tol_init, self.tol_step
        )

    def fit(self, X, y=None):
        if self.slack < 0:
            raise ValueError("slack must be non-negative")
        self.schedule  # validates tolerances
        self.client_flows_ = check_flows(X, Side.CLIENT)
        self.n_clients_ = len(self.client_flows_)
        return self

    def detect(self, X) -> list[CandidateSet]:
        check_is_fitted(self, "client_flows_")
        servers = check_flows(X, Side.SERVER)
        return detect_all(servers, self.client_flows_, self.schedule, self.slack, self.n_jobs)

    def predict(self, X) -> list[frozenset[ConnectionId]]:
        return [cs.candidates for cs in self.detect(X)]

    def score(self, X, y: Sequence[ConnectionId]) -> float:
        """Mean sensitivity: share of server flows whose true client is a candidate."""
        found = self.predict(X)
        if len(found) != len(y):
            raise ValueError("X and y have different lengths")
        if not found:
            return 0.0
        return float(np.mean([truth in c for c, truth in zip(found, y)]))
