"""Aggregate-flow assisted traffic classification pipeline."""

from .engines import (DEFAULT_PORT_TABLE, DEFAULT_SIGNATURES, Engine, OracleEngine, PortRule,
                      PortTableEngine, SignatureEngine, compile_signature, load_port_table,
                      load_signatures, make_engine)
from .pipeline import (DEFAULT_NONCACHEABLE, AdapterConfig, ClassifierConfig, ClassifierReport,
                       ClassifierState, ConnectionSummary, Disposition, DispositionKind,
                       NotCachedReason, OutputDecision, run_classification)

__all__ = [
    "AdapterConfig", "ClassifierConfig", "ClassifierReport", "ClassifierState", "ConnectionSummary",
    "DEFAULT_NONCACHEABLE", "DEFAULT_PORT_TABLE", "DEFAULT_SIGNATURES", "Disposition",
    "DispositionKind", "Engine", "NotCachedReason", "OracleEngine", "OutputDecision", "PortRule",
    "PortTableEngine", "SignatureEngine", "compile_signature", "load_port_table", "load_signatures",
    "make_engine", "run_classification",
]
