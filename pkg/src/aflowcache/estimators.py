"""scikit-learn style wrappers around the classifier and the locality analysis.

``X`` is always a packet trace: a sequence of :class:`PacketRecord` or a
DataFrame with the trace CSV columns.  The wrappers exist so the pipeline
can be dropped into parameter searches; the underlying functions remain the
primary API.
"""

from __future__ import annotations

import copy
from collections import Counter
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cache import Policy, resolve_capacity
from .classifier import AdapterConfig, ClassifierConfig, ClassifierState, make_engine
from .errors import EmptyInput, SchemaMismatch
from .flow import UNKNOWN, PacketRecord, canonical_tuple
from .locality import DEFAULT_MIN_COUNT, scramble_compare, stack_distances
from .msfilter import FilterConfig
from .traceio import connection_references
from .traceio.csvio import COLUMNS, parse_row


def _frame_records(frame) -> list[PacketRecord]:
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"trace frame lacks columns: {', '.join(missing)}")
    out = []
    for row in frame[list(COLUMNS)].itertuples(index=False):
        out.append(parse_row(["" if v is None or v != v else str(v) for v in row]))
    return out


def check_trace(X: Any, allow_empty: bool = False) -> list[PacketRecord]:
    """Validate ``X`` as a packet trace and return it as a list of records."""
    if hasattr(X, "columns") and hasattr(X, "itertuples"):
        records = _frame_records(X)
    else:
        records = list(X)
        for i, rec in enumerate(records):
            if not isinstance(rec, PacketRecord):
                raise SchemaMismatch(f"element {i} is {type(rec).__name__}, expected PacketRecord")
    if not records and not allow_empty:
        raise EmptyInput("trace has no packets")
    return records


class AggregateFlowClassifier(ClassifierMixin, BaseEstimator):
    """Per-packet application labels from the cached classification pipeline.

    ``fit`` streams a trace through a fresh pipeline, which warms the
    aggregate-flow cache.  ``predict`` continues from a copy of that warm
    state, so predicting never changes the fitted estimator.  Each packet is
    labeled with its connection's final label, ``"unknown"`` if none.
    """

    def __init__(self, engine: str = "oracle", policy: str = "ms-hybrid",
                 capacity: int | str | float = "100%", sample_prob: float = 0.0,
                 filter_stages: int = 4, filter_counters: int = 4096, filter_threshold: int = 2,
                 idle_timeout: float = 60.0, random_state: int = 0):
        self.engine = engine
        self.policy = policy
        self.capacity = capacity
        self.sample_prob = sample_prob
        self.filter_stages = filter_stages
        self.filter_counters = filter_counters
        self.filter_threshold = filter_threshold
        self.idle_timeout = idle_timeout
        self.random_state = random_state

    def _config(self) -> ClassifierConfig:
        return ClassifierConfig(
            capacity=self.capacity, policy=self.policy,
            filter=FilterConfig(self.filter_stages, self.filter_counters, self.filter_threshold,
                                seed=self.random_state),
            adapter=AdapterConfig(sample_prob=self.sample_prob, rng_seed=self.random_state),
            idle_timeout=self.idle_timeout,
        )

    @staticmethod
    def _with_truth(records: list[PacketRecord], y) -> list[PacketRecord]:
        if y is None:
            return records
        y = list(y)
        if len(y) != len(records):
            raise SchemaMismatch(f"y has {len(y)} labels for {len(records)} packets")
        return [PacketRecord(r.ts, r.tuple, r.tcp_flags, r.payload_len, r.payload, lab)
                for r, lab in zip(records, y)]

    def _run(self, state: ClassifierState, records: Sequence[PacketRecord]) -> np.ndarray:
        conns = []
        for rec in records:
            state.maybe_gc(rec.ts)
            state.process_packet(rec)
            conns.append(state.table[canonical_tuple(rec.tuple)])
        return np.array([c.label or UNKNOWN for c in conns], dtype=object)

    def fit(self, X, y=None):
        records = self._with_truth(check_trace(X), y)
        config = self._config()
        engine = make_engine(self.engine)
        engine.check_trace(records)
        refs = connection_references(records)
        capacity = config.capacity
        if not isinstance(capacity, int):
            capacity = resolve_capacity(capacity, len(set(refs)))
        oracle = Counter(refs) if config.policy is Policy.OPTIMAL_LFU else None
        self.state_ = ClassifierState(engine, config, capacity, oracle)
        labels = self._run(self.state_, records)
        self.classes_ = np.array(sorted(set(labels)), dtype=object)
        self.report_ = copy.deepcopy(self.state_.report)
        self.n_cached_ = len(self.state_.cache)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        records = check_trace(X)
        state = copy.deepcopy(self.state_)
        state.table.clear()
        state.engine.check_trace(records)
        return self._run(state, records)

    def score(self, X, y=None, sample_weight=None) -> float:
        records = check_trace(X)
        if y is None:
            y = [r.truth_label for r in records]
            if any(lab is None for lab in y):
                raise SchemaMismatch("score needs y or truth labels in the trace")
        return super().score(records, list(y), sample_weight)


def _references(X) -> list:
    if hasattr(X, "columns") or (len(X) and isinstance(X[0], PacketRecord)):
        return connection_references(check_trace(X))
    return list(X)


class LocalityAnalyzer(TransformerMixin, BaseEstimator):
    """Zipf and stack-distance locality of an aggregate-flow reference stream.

    ``X`` is a trace (one reference per connection) or a plain sequence of
    hashable keys.  ``transform`` returns stack distances with -1 for first
    references.
    """

    def __init__(self, min_count: int = DEFAULT_MIN_COUNT, random_state: int = 0):
        self.min_count = min_count
        self.random_state = random_state

    def fit(self, X, y=None):
        keys = _references(X)
        if not keys:
            raise EmptyInput("no references to analyze")
        rep = scramble_compare(keys, seed=self.random_state, min_count=self.min_count)
        self.report_ = rep
        self.alpha_ = rep.alpha
        self.alpha_stderr_ = rep.alpha_stderr
        self.slope_ = rep.slope_original
        self.slope_scrambled_ = rep.slope_scrambled
        self.ks_ = rep.ks_statistic
        self.n_distinct_ = rep.n_distinct
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "report_")
        return np.asarray(stack_distances(_references(X)).distances, dtype=np.int64)
