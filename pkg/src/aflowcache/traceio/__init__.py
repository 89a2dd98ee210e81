"""Trace ingestion, synthesis and export."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable

from ..errors import InvalidConfig
from ..flow import PacketRecord, aggregate_key, canonical_tuple, DEFAULT_WELL_KNOWN_PORTS
from .common import IngestStats, reorder
from .csvio import read_csv, write_csv
from .pcap import read_pcap, write_pcap
from .synthetic import (APPLICATIONS, SyntheticConfig, generate_synthetic, make_flows,
                        scramble_trace, synthetic_keys, synthetic_references)

__all__ = [
    "APPLICATIONS", "IngestStats", "SyntheticConfig", "connection_references", "detect_format",
    "generate_synthetic", "load_trace", "make_flows", "read_csv", "read_pcap", "reorder",
    "save_trace", "scramble_trace", "synthetic_keys", "synthetic_references", "write_csv",
    "write_pcap",
]


def detect_format(path: str | os.PathLike, fmt: str | None = None) -> str:
    if fmt:
        fmt = fmt.lower()
        if fmt not in ("csv", "pcap"):
            raise InvalidConfig(f"unknown trace format {fmt!r}")
        return fmt
    return "pcap" if Path(path).suffix.lower() in (".pcap", ".cap") else "csv"


def load_trace(path: str | os.PathLike, fmt: str | None = None):
    """Read a trace file; returns ``(records, stats)``."""
    if detect_format(path, fmt) == "pcap":
        with open(path, "rb") as fh:
            return read_pcap(fh)
    with open(path, newline="") as fh:
        return read_csv(fh)


def save_trace(records: Iterable[PacketRecord], path: str | os.PathLike, fmt: str | None = None) -> int:
    """Write a trace atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        if detect_format(path, fmt) == "pcap":
            with open(tmp, "wb") as fh:
                n = write_pcap(records, fh)
        else:
            with open(tmp, "w", newline="") as fh:
                n = write_csv(records, fh)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return n


def connection_references(records: Iterable[PacketRecord], per_packet: bool = False,
                          well_known_ports=DEFAULT_WELL_KNOWN_PORTS) -> list:
    """Aggregate-flow key referenced by each new connection (or by every packet)."""
    keys: dict = {}
    out = []
    for rec in records:
        ct = canonical_tuple(rec.tuple)
        key = keys.get(ct)
        if key is None:
            key = keys[ct] = aggregate_key(rec, None, well_known_ports)
            out.append(key)
        elif per_packet:
            out.append(key)
    return out
