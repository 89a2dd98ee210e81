"""Connection table -> aggregate-flow adapter -> identification engine.

A new connection first consults the aggregate-flow cache under its server
endpoint.  A valid cached label classifies the whole connection without the
engine, unless the connection is drawn for revalidation.  Everything else
goes to the engine, and the output filter decides whether the engine's
answer may be cached.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import math
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Hashable, Mapping, Sequence

from ..cache import AggregateFlowCache, CacheConfig, CacheStats, LabelUpdate, Policy, resolve_capacity
from ..errors import InvalidConfig
from ..flow import (DEFAULT_WELL_KNOWN_PORTS, FIN, RST, UNKNOWN, AggregateFlowKey, ConnectionRecord,
                    ConnState, IdentificationResult, PacketRecord, aggregate_key, canonical_tuple)
from ..msfilter import FilterConfig, MultistageFilter
from ..traceio import connection_references
from .engines import Engine

DEFAULT_NONCACHEABLE = frozenset({"ftp-data", "sip-media", UNKNOWN})


@dataclass(frozen=True)
class AdapterConfig:
    sample_prob: float = 0.0
    noncacheable_labels: frozenset[str] = DEFAULT_NONCACHEABLE
    conflict_blacklist_threshold: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sample_prob <= 1.0:
            raise InvalidConfig(f"sample_prob must lie in [0, 1], got {self.sample_prob}")
        if self.conflict_blacklist_threshold < 1:
            raise InvalidConfig("conflict_blacklist_threshold must be >= 1")
        object.__setattr__(self, "noncacheable_labels", frozenset(self.noncacheable_labels))


@dataclass(frozen=True)
class ClassifierConfig:
    """Pipeline settings.

    ``capacity`` is an entry count, a ``"15%"`` string, or a float fraction;
    the relative forms resolve against the trace's distinct aggregate-flows.
    """

    capacity: int | str | float = "100%"
    policy: Policy = Policy.MS_HYBRID
    filter: FilterConfig = field(default_factory=FilterConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    use_cache: bool = True
    idle_timeout: float = 60.0
    gc_interval: float = 1.0
    lookup_cost: float = 0.01
    well_known_ports: frozenset[int] = DEFAULT_WELL_KNOWN_PORTS

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy.parse(self.policy))
        if self.idle_timeout <= 0 or self.gc_interval <= 0:
            raise InvalidConfig("idle_timeout and gc_interval must be positive")
        if self.lookup_cost < 0:
            raise InvalidConfig("lookup_cost must be >= 0")


class DispositionKind(enum.Enum):
    PASS_THROUGH = "pass_through"
    SENT_TO_ENGINE = "sent_to_engine"
    PENDING = "pending"


@dataclass(frozen=True)
class Disposition:
    """Outcome for one packet.

    ``SENT_TO_ENGINE`` means the engine inspected the packet and reached a
    verdict on it; ``PENDING`` means it inspected the packet without one.
    """

    kind: DispositionKind
    label: str | None = None


class NotCachedReason(str, enum.Enum):
    NONCACHEABLE = "noncacheable"
    BLACKLISTED = "blacklisted"
    ADMISSION = "admission"
    NO_CACHE = "no_cache"


@dataclass(frozen=True)
class OutputDecision:
    cached: bool
    reason: NotCachedReason | None = None


@dataclass
class ConnectionSummary:
    tuple: str
    key: str
    label: str
    source: str
    packets: int


@dataclass
class ClassifierReport:
    total_connections: int = 0
    engine_connections: int = 0
    cache_labeled_connections: int = 0
    sampled_connections: int = 0
    pending_connections: int = 0
    unidentified_connections: int = 0
    packets: int = 0
    engine_work_units: float = 0.0
    lookup_work_units: float = 0.0
    baseline_work_units: float | None = None
    per_label: Counter = field(default_factory=Counter)
    labeled_with_truth: int = 0
    correct: int = 0
    dispositions: Counter = field(default_factory=Counter)
    not_cached: Counter = field(default_factory=Counter)
    conflicts: int = 0
    blacklisted: int = 0
    gc_evictions: int = 0
    cache: CacheStats = field(default_factory=CacheStats)
    filter: Counter = field(default_factory=Counter)
    shards: int = 1
    connections: list[ConnectionSummary] = field(default_factory=list, repr=False)

    @property
    def workload_reduction(self) -> float:
        if not self.total_connections:
            return 0.0
        return 1.0 - self.engine_connections / self.total_connections

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.labeled_with_truth if self.labeled_with_truth else None

    @property
    def classifier_work_units(self) -> float:
        return self.engine_work_units + self.lookup_work_units

    @property
    def speedup_estimate(self) -> float | None:
        if self.baseline_work_units is None:
            return None
        if self.classifier_work_units == 0:
            return 1.0 if self.baseline_work_units == 0 else math.inf
        return self.baseline_work_units / self.classifier_work_units

    def merge(self, other: ClassifierReport) -> ClassifierReport:
        """Additive combination of two shard reports."""
        out = ClassifierReport()
        for name in ("total_connections", "engine_connections", "cache_labeled_connections",
                     "sampled_connections", "pending_connections", "unidentified_connections",
                     "packets", "engine_work_units", "lookup_work_units", "labeled_with_truth",
                     "correct", "conflicts", "blacklisted", "gc_evictions", "shards"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        if self.baseline_work_units is not None and other.baseline_work_units is not None:
            out.baseline_work_units = self.baseline_work_units + other.baseline_work_units
        for name in ("per_label", "dispositions", "not_cached", "filter"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        for name in vars(out.cache):
            setattr(out.cache, name, getattr(self.cache, name) + getattr(other.cache, name))
        out.connections = self.connections + other.connections
        return out

    def to_dict(self) -> dict:
        return {
            "total_connections": self.total_connections,
            "engine_connections": self.engine_connections,
            "cache_labeled_connections": self.cache_labeled_connections,
            "sampled_connections": self.sampled_connections,
            "pending_connections": self.pending_connections,
            "unidentified_connections": self.unidentified_connections,
            "workload_reduction": self.workload_reduction,
            "packets": self.packets,
            "engine_work_units": self.engine_work_units,
            "lookup_work_units": self.lookup_work_units,
            "classifier_work_units": self.classifier_work_units,
            "baseline_work_units": self.baseline_work_units,
            "speedup_estimate": self.speedup_estimate,
            "per_label": dict(sorted(self.per_label.items())),
            "accuracy": self.accuracy,
            "labeled_with_truth": self.labeled_with_truth,
            "correct": self.correct,
            "dispositions": dict(sorted(self.dispositions.items())),
            "not_cached": dict(sorted(self.not_cached.items())),
            "conflicts": self.conflicts,
            "blacklisted": self.blacklisted,
            "gc_evictions": self.gc_evictions,
            "cache": self.cache.as_dict(),
            "filter": dict(sorted(self.filter.items())),
            "shards": self.shards,
        }


class ClassifierState:
    """Single-threaded classification state machine for one trace (or shard)."""

    def __init__(
        self,
        engine: Engine,
        config: ClassifierConfig | None = None,
        capacity: int | None = None,
        oracle_frequencies: Mapping[Hashable, int] | None = None,
        record_connections: bool = False,
    ):
        self.engine = engine
        self.config = config or ClassifierConfig()
        cfg = self.config
        if capacity is None:
            if not isinstance(cfg.capacity, int):
                raise InvalidConfig("relative capacity needs a trace; pass capacity= explicitly")
            capacity = cfg.capacity
        self.filter = MultistageFilter(cfg.filter)
        self.cache = AggregateFlowCache(CacheConfig(capacity, cfg.policy, oracle_frequencies),
                                        self.filter)
        self.adapter = cfg.adapter
        self.rng = random.Random(cfg.adapter.rng_seed)
        self.table: dict = {}
        self.blacklist: set[AggregateFlowKey] = set()
        self.clock = 0
        self.last_gc: float | None = None
        self.report = ClassifierReport()
        self.report.cache = self.cache.stats
        self.record_connections = record_connections

    def _label_connection(self, conn: ConnectionRecord, label: str, source: str) -> None:
        rep = self.report
        conn.label = label
        conn.source = source
        if label == UNKNOWN:
            rep.unidentified_connections += 1
        else:
            conn.state = ConnState.LABELED
            if conn.truth_label is not None:
                rep.labeled_with_truth += 1
                rep.correct += conn.truth_label == label
        rep.per_label[label] += 1

    def process_packet(self, packet: PacketRecord) -> Disposition:
        rep = self.report
        rep.packets += 1
        ct = canonical_tuple(packet.tuple)
        conn = self.table.get(ct)
        new = conn is None
        if new:
            key = aggregate_key(packet, None, self.config.well_known_ports)
            conn = ConnectionRecord(ct, key, packet.ts, packet.ts, truth_label=packet.truth_label)
            self.table[ct] = conn
            rep.total_connections += 1
            self.clock += 1
        conn.last_ts = packet.ts
        conn.packets_seen += 1
        conn.bytes_seen += packet.payload_len
        if packet.tcp_flags & RST:
            conn.reset = True
        if packet.tcp_flags & FIN:
            conn.fin_mask |= 1 if packet.tuple.src == ct.src else 2

        if conn.label is not None:
            rep.dispositions[DispositionKind.PASS_THROUGH.value] += 1
            return Disposition(DispositionKind.PASS_THROUGH, conn.label)

        if new and self.config.use_cache:
            rep.lookup_work_units += self.config.lookup_cost
            entry = self.cache.lookup(conn.key, self.clock)
            if entry is not None and entry.label != UNKNOWN:
                p = self.adapter.sample_prob
                if p > 0 and self.rng.random() < p:
                    conn.state = ConnState.SAMPLED
                    conn.sampled = True
                    rep.sampled_connections += 1
                else:
                    self._label_connection(conn, entry.label, "cache")
                    rep.cache_labeled_connections += 1
                    rep.dispositions[DispositionKind.PASS_THROUGH.value] += 1
                    return Disposition(DispositionKind.PASS_THROUGH, entry.label)

        if conn.engine_packets == 0:
            rep.engine_connections += 1
        conn.engine_packets += 1
        rep.engine_work_units += self.engine.cost(packet)
        result = self.engine.identify(conn, packet)
        if result is None:
            rep.dispositions[DispositionKind.PENDING.value] += 1
            return Disposition(DispositionKind.PENDING)
        conn.engine_done = True
        self._label_connection(conn, result.label, "engine")
        if self.config.use_cache:
            decision = self.output_filter(conn, result)
            if not decision.cached:
                rep.not_cached[decision.reason.value] += 1
        rep.dispositions[DispositionKind.SENT_TO_ENGINE.value] += 1
        return Disposition(DispositionKind.SENT_TO_ENGINE, result.label)

    def output_filter(self, conn: ConnectionRecord, result: IdentificationResult) -> OutputDecision:
        """Decide whether the engine's result for ``conn`` goes into the cache."""
        if not self.config.use_cache:
            return OutputDecision(False, NotCachedReason.NO_CACHE)
        key = conn.key
        if not result.cacheable or result.label in self.adapter.noncacheable_labels:
            return OutputDecision(False, NotCachedReason.NONCACHEABLE)
        if key in self.blacklist:
            return OutputDecision(False, NotCachedReason.BLACKLISTED)
        cache = self.cache
        entry = cache.peek(key)
        if entry is not None:
            if cache.update_label(key, result.label) is LabelUpdate.CONFLICT_RECORDED:
                self.report.conflicts += 1
                if entry.conflict_count >= self.adapter.conflict_blacklist_threshold:
                    cache.remove(key)
                    self.blacklist.add(key)
                    self.report.blacklisted += 1
                    return OutputDecision(False, NotCachedReason.BLACKLISTED)
            cache.touch(key, self.clock)
            return OutputDecision(True)
        frequency = cache.admit(key)
        if frequency is None:
            return OutputDecision(False, NotCachedReason.ADMISSION)
        cache.insert(key, result.label, self.clock, frequency)
        return OutputDecision(True)

    def _retire(self, conn: ConnectionRecord) -> None:
        if conn.label is None and not conn.engine_done:
            self.report.pending_connections += 1
        if self.record_connections:
            self.report.connections.append(ConnectionSummary(
                str(conn.tuple), str(conn.key), conn.label or UNKNOWN,
                conn.source or "pending", conn.packets_seen))

    def connection_table_gc(self, now: float) -> int:
        """Drop connections that closed (FIN both ways, or RST) or sat idle too long."""
        timeout = self.config.idle_timeout
        dead = [ct for ct, c in self.table.items() if c.closed or now - c.last_ts > timeout]
        for ct in dead:
            self._retire(self.table.pop(ct))
        self.report.gc_evictions += len(dead)
        return len(dead)

    def maybe_gc(self, now: float) -> None:
        if self.last_gc is None:
            self.last_gc = now
        elif now - self.last_gc >= self.config.gc_interval:
            self.connection_table_gc(now)
            self.last_gc = now

    def finish(self) -> ClassifierReport:
        """Retire every remaining connection and return the final report."""
        for conn in self.table.values():
            self._retire(conn)
        self.table.clear()
        self.report.filter = Counter(vars(self.filter.stats))
        return self.report


def _shard_of(key: AggregateFlowKey, n: int) -> int:
    return int.from_bytes(hashlib.blake2b(key.to_bytes(), digest_size=8).digest(), "little") % n


def _run_single(records, engine, config, capacity, oracle, record_connections) -> ClassifierReport:
    state = ClassifierState(engine, config, capacity, oracle, record_connections)
    for rec in records:
        state.maybe_gc(rec.ts)
        state.process_packet(rec)
    return state.finish()


def _run_shard(args) -> ClassifierReport:
    return _run_single(*args)


def run_classification(
    records: Sequence[PacketRecord],
    engine: Engine,
    config: ClassifierConfig | None = None,
    *,
    baseline: bool = True,
    workers: int = 1,
    parallel: bool = True,
    record_connections: bool = False,
) -> ClassifierReport:
    """Stream a trace through the classifier and return its report.

    With ``baseline`` the trace is also replayed without the cache; the
    engine work of that run is the denominator-free reference for
    ``speedup_estimate``.  ``workers > 1`` shards connections by a hash of
    their aggregate-flow key; every shard owns its table, filter and cache
    (capacity split evenly) and the reports are summed.
    """
    config = config or ClassifierConfig()
    records = list(records)
    engine.check_trace(records)
    refs = None
    if not isinstance(config.capacity, int) or config.policy is Policy.OPTIMAL_LFU:
        refs = connection_references(records, well_known_ports=config.well_known_ports)
    capacity = config.capacity
    if not isinstance(capacity, int):
        capacity = resolve_capacity(capacity, len(set(refs)))
    oracle = Counter(refs) if config.policy is Policy.OPTIMAL_LFU else None
    if workers < 1:
        raise InvalidConfig("workers must be >= 1")

    if workers == 1:
        report = _run_single(records, engine, config, capacity, oracle, record_connections)
    else:
        shards: list[list[PacketRecord]] = [[] for _ in range(workers)]
        owner: dict = {}
        for rec in records:
            ct = canonical_tuple(rec.tuple)
            s = owner.get(ct)
            if s is None:
                key = aggregate_key(rec, None, config.well_known_ports)
                s = owner[ct] = _shard_of(key, workers)
            shards[s].append(rec)
        per_shard = max(1, math.ceil(capacity / workers))
        jobs = []
        for i, shard in enumerate(shards):
            cfg = replace(config, adapter=replace(config.adapter, rng_seed=config.adapter.rng_seed + i))
            jobs.append((shard, copy.deepcopy(engine), cfg, per_shard, oracle, record_connections))
        if parallel:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(_run_shard, jobs))
        else:
            parts = [_run_shard(job) for job in jobs]
        report = parts[0]
        for part in parts[1:]:
            report = report.merge(part)

    if baseline:
        base = _run_single(records, engine, replace(config, use_cache=False), capacity, None, False)
        report.baseline_work_units = base.engine_work_units
    return report
