"""Aggregate-flow caching for traffic classification.

The package models a classifier that labels whole server endpoints
(aggregate-flows) instead of single connections, caches those labels behind
a multistage-filter admission gate, and measures the temporal locality that
makes the cache work.
"""

from .cache import (ALL_POLICIES, AggregateFlowCache, CacheConfig, CacheStats, Policy,
                    PolicyResult, run_policy_comparison, simulate)
from .errors import AflowError, ConfigError, InputError, InvariantViolation
from .flow import (AggregateFlowKey, ConnectionRecord, Endpoint, FiveTuple, IdentificationResult,
                   PacketRecord, TransportProto, aggregate_key, canonical_tuple)
from .msfilter import Decision, FilterConfig, MultistageFilter, false_positive_bound

__version__ = "0.1.0"

__all__ = [
    "ALL_POLICIES", "AflowError", "AggregateFlowCache", "AggregateFlowKey", "CacheConfig",
    "CacheStats", "ConfigError", "ConnectionRecord", "Decision", "Endpoint", "FilterConfig",
    "FiveTuple", "IdentificationResult", "InputError", "InvariantViolation", "MultistageFilter",
    "PacketRecord", "Policy", "PolicyResult", "TransportProto", "__version__", "aggregate_key",
    "canonical_tuple", "false_positive_bound", "run_policy_comparison", "simulate",
]
