"""Fixed-capacity aggregate-flow cache with pluggable replacement.

Policies
--------
``ms-hybrid``
    Eviction picks the least recently used entry among those tied at the
    cache-wide minimum access frequency.  Once the cache is full, a missed key
    may only replace an entry after passing a multistage filter, and it enters
    with the filter's count estimate as its frequency.
``lfu``
    In-cache LFU: same victim rule, no admission filter.
``lru``
    Least recently used.
``optimal-lfu``
    Victim is the entry with the smallest *total* popularity, known in
    advance from a first pass over the trace.

Policies keep a map ``bucket -> keys in recency order`` (bucket = access
frequency, oracle popularity, or a single bucket for LRU).  A hit is an O(1)
bucket move and a victim is the head of the lowest bucket, found through a
lazily pruned heap of bucket ids.
Entries never expire; they leave only when the cache is full.
"""

from __future__ import annotations

import enum
import heapq
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

from .errors import EmptyInput, InvalidConfig
from .flow import UNKNOWN
from .msfilter import COUNTER_MAX, Decision, FilterConfig, MultistageFilter


class Policy(str, enum.Enum):
    MS_HYBRID = "ms-hybrid"
    LRU = "lru"
    LFU_IN_CACHE = "lfu"
    OPTIMAL_LFU = "optimal-lfu"

    @classmethod
    def parse(cls, value: str | Policy) -> Policy:
        if isinstance(value, Policy):
            return value
        token = str(value).strip().lower().replace("_", "-")
        aliases = {"mshybrid": "ms-hybrid", "ms": "ms-hybrid", "lfu-in-cache": "lfu",
                   "in-cache-lfu": "lfu", "optimal": "optimal-lfu", "optlfu": "optimal-lfu"}
        token = aliases.get(token, token)
        try:
            return cls(token)
        except ValueError:
            raise InvalidConfig(
                f"unknown policy {value!r}; choose from {', '.join(p.value for p in cls)}"
            ) from None


ALL_POLICIES = (Policy.MS_HYBRID, Policy.LRU, Policy.LFU_IN_CACHE, Policy.OPTIMAL_LFU)


@dataclass(slots=True)
class AggregateFlowEntry:
    key: Hashable
    label: str
    frequency: int
    last_access: int
    inserted_at: int
    conflict_count: int = 0
    origin_label: str | None = None  # label at insertion; conflicts are counted against it


@dataclass
class CacheConfig:
    capacity: int
    policy: Policy = Policy.MS_HYBRID
    oracle_frequencies: Mapping[Hashable, int] | None = None

    def __post_init__(self):
        self.policy = Policy.parse(self.policy)
        if self.capacity < 1:
            raise InvalidConfig(f"cache capacity must be >= 1, got {self.capacity}")
        if self.policy is Policy.OPTIMAL_LFU and self.oracle_frequencies is None:
            raise InvalidConfig("optimal-lfu needs oracle_frequencies")


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    insertions: int = 0
    evictions: int = 0
    admission_rejects: int = 0

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def as_dict(self) -> dict:
        return {
            "lookups": self.lookups,
            "hits": self.hits,
            "misses": self.misses,
            "insertions": self.insertions,
            "evictions": self.evictions,
            "admission_rejects": self.admission_rejects,
            "hit_ratio": self.hit_ratio,
        }


class InsertOutcome(enum.Enum):
    INSERTED = "inserted"
    REPLACED = "replaced"
    ALREADY_PRESENT = "already_present"


@dataclass(frozen=True)
class InsertResult:
    outcome: InsertOutcome
    evicted: Hashable | None = None


class LabelUpdate(enum.Enum):
    UPDATED = "updated"
    CONFLICT_RECORDED = "conflict_recorded"
    ABSENT = "absent"


@dataclass
class CacheLog:
    """Event trace for equivalence checks: logical times of misses, and evictions."""

    misses: list = field(default_factory=list)
    evictions: list = field(default_factory=list)  # (now, evicted key)
    inserts: list = field(default_factory=list)  # (now, key, initial frequency)


class AggregateFlowCache:
    """Aggregate-flow cache keyed by any hashable flow identity.

    ``admission`` is consulted by :meth:`reference` for the ms-hybrid policy
    only; the other policies insert every missed key.
    """

    def __init__(self, config: CacheConfig, admission: MultistageFilter | None = None,
                 admit_free_slots: bool = True):
        self.config = config
        self.admit_free_slots = admit_free_slots
        self.policy = config.policy
        self.capacity = config.capacity
        self.admission = admission if self.policy is Policy.MS_HYBRID else None
        self.stats = CacheStats()
        self.entries: dict[Hashable, AggregateFlowEntry] = {}
        # bucket id -> keys in recency order (dict used as an ordered set)
        self._buckets: dict[int, dict[Hashable, None]] = {}
        self._min_bucket = 0
        self._heap: list[int] = []
        self._oracle = config.oracle_frequencies
        self._by_frequency = self.policy in (Policy.MS_HYBRID, Policy.LFU_IN_CACHE)
        # entries inspected while choosing victims; should not scale with capacity
        self.eviction_probes = 0
        self.log: CacheLog | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def peek(self, key) -> AggregateFlowEntry | None:
        return self.entries.get(key)

    def _bucket_of(self, entry: AggregateFlowEntry) -> int:
        if self.policy is Policy.LRU:
            return 0
        if self.policy is Policy.OPTIMAL_LFU:
            return self._oracle.get(entry.key, 0)
        return entry.frequency

    def _new_bucket(self, bucket: int) -> dict:
        b = self._buckets[bucket] = {}
        heap = self._heap
        heapq.heappush(heap, bucket)
        if len(heap) > 2 * len(self._buckets) + 64:
            self._rebuild_heap()
        return b

    def _rebuild_heap(self) -> None:
        self._heap = heap = list(self._buckets)
        heapq.heapify(heap)

    def _bucket_add(self, key, bucket: int) -> None:
        b = self._buckets.get(bucket)
        if b is None:
            b = self._new_bucket(bucket)
        b[key] = None
        if len(self.entries) <= 1 or bucket < self._min_bucket:
            self._min_bucket = bucket

    def _bucket_discard(self, key, bucket: int) -> None:
        b = self._buckets[bucket]
        del b[key]
        if not b:
            del self._buckets[bucket]
            if bucket == self._min_bucket:
                self._min_bucket = self._next_min()

    def _next_min(self) -> int:
        if not self._buckets:
            return 0
        heap, buckets = self._heap, self._buckets
        while heap[0] not in buckets:
            heapq.heappop(heap)
            self.eviction_probes += 1
        return heap[0]

    def _move(self, key, old: int, new: int) -> None:
        b = self._buckets[old]
        del b[key]
        if old == new:
            b[key] = None
            return
        nb = self._buckets.get(new)
        if nb is None:
            nb = self._new_bucket(new)
        nb[key] = None
        if not b:
            del self._buckets[old]
            if old == self._min_bucket:
                self._min_bucket = self._next_min()

    def lookup(self, key, now: int) -> AggregateFlowEntry | None:
        stats = self.stats
        stats.lookups += 1
        entry = self.entries.get(key)
        if entry is None:
            stats.misses += 1
            if self.log is not None:
                self.log.misses.append(now)
            return None
        stats.hits += 1
        old = self._bucket_of(entry)
        entry.frequency += 1
        if now > entry.last_access:
            entry.last_access = now
        self._move(key, old, old + 1 if self._by_frequency else old)
        return entry

    def touch(self, key, now: int) -> bool:
        """Refresh recency without counting an access."""
        entry = self.entries.get(key)
        if entry is None:
            return False
        entry.last_access = max(now, entry.last_access)
        bucket = self._bucket_of(entry)
        self._move(key, bucket, bucket)
        return True

    def victim(self):
        """Key the policy would evict next, or ``None`` when empty."""
        if not self.entries:
            return None
        self.eviction_probes += 1
        return next(iter(self._buckets[self._min_bucket]))

    def remove(self, key) -> bool:
        entry = self.entries.pop(key, None)
        if entry is None:
            return False
        self._bucket_discard(key, self._bucket_of(entry))
        return True

    def insert(self, key, label: str, now: int, frequency: int = 1) -> InsertResult:
        """Insert ``key``; ``frequency`` is the access count it starts with."""
        entry = self.entries.get(key)
        if entry is not None:
            entry.label = label
            return InsertResult(InsertOutcome.ALREADY_PRESENT)
        evicted = None
        if len(self.entries) >= self.capacity:
            evicted = self.victim()
            self.remove(evicted)
            self.stats.evictions += 1
            if self.log is not None:
                self.log.evictions.append((now, evicted))
        entry = AggregateFlowEntry(key, label, max(1, frequency), now, now, 0, label)
        if self.log is not None:
            self.log.inserts.append((now, key, entry.frequency))
        self.entries[key] = entry
        self._bucket_add(key, self._bucket_of(entry))
        self.stats.insertions += 1
        if evicted is None:
            return InsertResult(InsertOutcome.INSERTED)
        return InsertResult(InsertOutcome.REPLACED, evicted)

    def admit(self, key) -> int | None:
        """Admission decision for a missed ``key``.

        Returns the frequency the key should be inserted with, or ``None``
        when the multistage filter holds it back.  Without a filter every key
        is admitted at frequency 1.  The filter observes every call; its
        verdict only matters when inserting would force an eviction.
        """
        f = self.admission
        if f is None:
            return 1
        decision = f.observe(key)
        if decision is Decision.HOLD and not (self.admit_free_slots and len(self.entries) < self.capacity):
            self.stats.admission_rejects += 1
            return None
        return f.last_estimate

    def update_label(self, key, new_label: str) -> LabelUpdate:
        """Store a fresh result for ``key``.

        Any result that disagrees with the label the entry was inserted with
        counts as a conflict, so an endpoint that keeps answering differently
        accumulates conflicts even after its label has been overwritten.
        """
        entry = self.entries.get(key)
        if entry is None:
            return LabelUpdate.ABSENT
        entry.label = new_label
        if new_label == entry.origin_label:
            return LabelUpdate.UPDATED
        entry.conflict_count += 1
        return LabelUpdate.CONFLICT_RECORDED

    def replay(self, keys: Iterable[Hashable], start: int = 0, label: str = UNKNOWN) -> int:
        """Feed a reference sequence through :meth:`reference`; returns hits.

        Logical time of the i-th key is ``start + i``.  Both the hit and the
        miss path are inlined because trace replay dominates simulation
        time; ``tests/test_cache.py`` checks it against the per-call path.
        """
        entries, buckets = self.entries, self._buckets
        stats, capacity = self.stats, self.capacity
        by_freq = self._by_frequency
        oracle = self._oracle if self.policy is Policy.OPTIMAL_LFU else None
        filt = self.admission
        # the filter update is inlined too; the plain observe() is the reference
        inline = type(filt) is MultistageFilter
        observe = filt.observe if filt is not None and not inline else None
        if inline:
            counters, indices, memo = filt.counters, filt.indices, filt._memo
            period, fstats = filt.config.reset_period, filt.stats
        threshold = filt.config.T if filt is not None else 0
        gate_free = not self.admit_free_slots
        log = self.log
        miss_log = log.misses if log is not None else None
        new_bucket, next_min = self._new_bucket, self._next_min
        heappush = heapq.heappush
        hits = misses = rejects = evictions = 0
        fobs = filt.observations if inline else 0
        observed = admits = 0
        try:
            for now, key in enumerate(keys, start):
                e = entries.get(key)
                if e is None:
                    misses += 1
                    if miss_log is not None:
                        miss_log.append(now)
                    frequency = 1
                    if inline:
                        frequency = COUNTER_MAX
                        for stage, idx in zip(counters, memo.get(key) or indices(key)):
                            c = stage[idx]
                            if c < COUNTER_MAX:
                                c += 1
                                stage[idx] = c
                            if c < frequency:
                                frequency = c
                        observed += 1
                        if frequency >= threshold:
                            admits += 1
                        fobs += 1
                        if period and fobs >= period:
                            filt.observations = fobs
                            filt.reset()
                            fobs = 0
                    elif observe is not None:
                        observe(key)
                        frequency = filt.last_estimate
                    if filt is not None:
                        if frequency < threshold and (gate_free or len(entries) >= capacity):
                            rejects += 1
                            continue
                        if frequency < 1:
                            frequency = 1
                    if by_freq:
                        bucket = frequency
                    else:
                        bucket = 0 if oracle is None else oracle.get(key, 0)
                    if len(entries) >= capacity:
                        mb = self._min_bucket
                        b = buckets[mb]
                        victim = next(iter(b))
                        del b[victim]
                        del entries[victim]
                        # an emptied min bucket is kept if the new key lands in it, and
                        # the min needs no search if the new key lands at or below it
                        if not b and bucket != mb:
                            del buckets[mb]
                            if bucket < mb:
                                self._min_bucket = bucket
                            else:
                                self._min_bucket = next_min()
                        evictions += 1
                        if log is not None:
                            log.evictions.append((now, victim))
                    entries[key] = AggregateFlowEntry(key, label, frequency, now, now, 0, label)
                    nb = buckets.get(bucket)
                    if nb is None:
                        nb = new_bucket(bucket)
                    nb[key] = None
                    if len(entries) == 1 or bucket < self._min_bucket:
                        self._min_bucket = bucket
                    if log is not None:
                        log.inserts.append((now, key, frequency))
                    continue
                hits += 1
                f = e.frequency
                e.frequency = f + 1
                if now > e.last_access:
                    e.last_access = now
                if by_freq:
                    b = buckets[f]
                    nb = buckets.get(f + 1)
                    if nb is None and len(b) == 1:
                        # sole member of its bucket: relabel the bucket in place
                        del buckets[f]
                        buckets[f + 1] = b
                        heap = self._heap
                        heappush(heap, f + 1)
                        if len(heap) > 2 * len(buckets) + 64:
                            self._rebuild_heap()
                        if f == self._min_bucket:
                            self._min_bucket = f + 1
                        continue
                    del b[key]
                    if nb is None:
                        nb = new_bucket(f + 1)
                    nb[key] = None
                    if not b:
                        del buckets[f]
                        if f == self._min_bucket:
                            self._min_bucket = next_min()
                else:
                    b = buckets[0 if oracle is None else oracle.get(key, 0)]
                    del b[key]
                    b[key] = None
        finally:
            stats.lookups += hits + misses
            stats.hits += hits
            stats.misses += misses
            stats.admission_rejects += rejects
            stats.evictions += evictions
            stats.insertions += misses - rejects
            self.eviction_probes += evictions
            if inline and observed:
                filt.observations = fobs
                filt.last_estimate = frequency
                fstats.observations += observed
                fstats.admits += admits
                fstats.holds += observed - admits
        return hits

    def reference(self, key, now: int, label: str = UNKNOWN) -> bool:
        """Replay one reference: lookup, and on a miss admit/insert. Returns hit."""
        if self.lookup(key, now) is not None:
            return True
        frequency = self.admit(key)
        if frequency is not None:
            self.insert(key, label, now, frequency)
        return False


def resolve_capacity(spec: str | int | float, n_distinct: int) -> int:
    """Turn ``"15%"``, ``0.15`` (with ``frac``), or ``1500`` into an entry count."""
    if isinstance(spec, str):
        text = spec.strip()
        if text.endswith("%"):
            try:
                pct = float(text[:-1])
            except ValueError:
                raise InvalidConfig(f"bad capacity {spec!r}") from None
            if pct <= 0:
                raise InvalidConfig(f"capacity must be positive, got {spec!r}")
            return max(1, round(n_distinct * pct / 100.0))
        try:
            spec = int(text)
        except ValueError:
            raise InvalidConfig(f"bad capacity {spec!r}") from None
    if isinstance(spec, float):
        if not 0 < spec:
            raise InvalidConfig(f"capacity fraction must be positive, got {spec}")
        return max(1, round(n_distinct * spec))
    if spec < 1:
        raise InvalidConfig(f"capacity must be >= 1, got {spec}")
    return int(spec)


@dataclass
class PolicyResult:
    policy: Policy
    capacity: int
    lookups: int
    hits: int
    evictions: int = 0
    admission_rejects: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    @property
    def misses(self) -> int:
        return self.lookups - self.hits

    def row(self) -> dict:
        return {"policy": self.policy.value, "capacity": self.capacity,
                "capacity_spec": self.extra.get("capacity_spec", str(self.capacity)),
                "lookups": self.lookups, "hits": self.hits, "hit_ratio": self.hit_ratio,
                "evictions": self.evictions}


def simulate(
    keys: Sequence[Hashable],
    capacity: int,
    policy: Policy | str,
    filter_config: FilterConfig | None = None,
    oracle_frequencies: Mapping[Hashable, int] | None = None,
) -> PolicyResult:
    policy = Policy.parse(policy)
    if policy is Policy.OPTIMAL_LFU and oracle_frequencies is None:
        oracle_frequencies = Counter(keys)
    cache = AggregateFlowCache(
        CacheConfig(capacity, policy, oracle_frequencies),
        MultistageFilter(filter_config or FilterConfig()) if policy is Policy.MS_HYBRID else None,
    )
    cache.replay(keys)
    s = cache.stats
    return PolicyResult(policy, capacity, s.lookups, s.hits, s.evictions, s.admission_rejects)


def run_policy_comparison(
    keys: Iterable[Hashable],
    capacities: Sequence[int | str | float],
    policies: Sequence[Policy | str] = ALL_POLICIES,
    filter_config: FilterConfig | None = None,
) -> list[PolicyResult]:
    """Replay ``keys`` through a fresh cache per (policy, capacity) cell.

    Capacities may be relative (``"15%"``, ``0.15``) and resolve against the
    number of distinct keys.  Optimal-LFU takes its popularity table from a
    first pass over ``keys``.  Logical time is the reference index, so
    results are deterministic.
    """
    keys = list(keys)
    if not keys:
        raise EmptyInput("no references to simulate")
    oracle = Counter(keys)
    sizes = [(str(c), resolve_capacity(c, len(oracle))) for c in capacities]
    results = []
    for policy in policies:
        policy = Policy.parse(policy)
        for spec, capacity in sizes:
            res = simulate(keys, capacity, policy, filter_config, oracle)
            res.extra["capacity_spec"] = spec
            results.append(res)
    return results
