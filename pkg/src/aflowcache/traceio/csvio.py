"""CSV trace format, the canonical interchange format for header-only traces.

Columns: ``ts,src_ip,src_port,dst_ip,dst_port,proto,len,flags,label,payload_hex``.
``len`` is the transport payload length on the wire; ``payload_hex`` holds
the captured part of it, if any.
"""

from __future__ import annotations

import csv
from typing import IO, Iterable

from ..errors import ParseError, SchemaMismatch, UnsupportedProtocol
from ..flow import (Endpoint, FiveTuple, PacketRecord, TransportProto, format_flags,
                    ip_to_str, parse_flags, validate_label)
from .common import REORDER_WINDOW, IngestStats, reorder

COLUMNS = ("ts", "src_ip", "src_port", "dst_ip", "dst_port", "proto", "len", "flags", "label",
           "payload_hex")


def _endpoint(ip: str, port: str, proto: TransportProto, memo: dict | None) -> Endpoint:
    if memo is None:
        return Endpoint.of(ip, int(port), proto)
    k = (ip, port, proto)
    ep = memo.get(k)
    if ep is None:
        ep = memo[k] = Endpoint.of(ip, int(port), proto)
    return ep


def parse_row(row: list[str], memo: dict | None = None) -> PacketRecord:
    """One CSV row to a record; ``memo`` caches parsed endpoints across rows."""
    if len(row) != len(COLUMNS):
        raise ValueError(f"expected {len(COLUMNS)} fields, got {len(row)}")
    ts, sip, sport, dip, dport, proto, length, flags, label, payload_hex = (f.strip() for f in row)
    proto = TransportProto.parse(proto)
    payload = bytes.fromhex(payload_hex) if payload_hex else None
    tcp_flags = parse_flags(flags) if proto is TransportProto.TCP else 0
    return PacketRecord(
        ts=float(ts),
        tuple=FiveTuple(_endpoint(sip, sport, proto, memo), _endpoint(dip, dport, proto, memo)),
        tcp_flags=tcp_flags,
        payload_len=int(length),
        payload=payload,
        truth_label=validate_label(label) if label else None,
    )


def _rows(stream: IO[str], stats: IngestStats):
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch("empty CSV: header row required") from None
    if tuple(h.strip() for h in header) != COLUMNS:
        raise SchemaMismatch(f"CSV header must be {','.join(COLUMNS)!r}, got {','.join(header)!r}")
    memo: dict = {}
    for row in reader:
        if not row:
            continue
        if len(memo) > 1 << 16:
            memo.clear()
        try:
            rec = parse_row(row, memo)
        except UnsupportedProtocol as exc:
            stats.skip("non_tcp_udp", f"line {reader.line_num}: {exc}")
            continue
        except (ValueError, TypeError) as exc:
            stats.skip("parse_error", str(ParseError(str(exc), reader.line_num)))
            continue
        stats.records += 1
        yield rec


def read_csv(stream: IO[str], reorder_window: float = REORDER_WINDOW):
    """Parse a CSV trace. Returns ``(records, stats)``; bad rows are skipped and counted."""
    stats = IngestStats()
    records = list(reorder(_rows(stream, stats), reorder_window))
    return records, stats


def format_row(rec: PacketRecord) -> list[str]:
    t = rec.tuple
    return [
        f"{rec.ts:.6f}",
        ip_to_str(t.src.ip), str(t.src.port),
        ip_to_str(t.dst.ip), str(t.dst.port),
        t.proto.token,
        str(rec.payload_len),
        format_flags(rec.tcp_flags),
        rec.truth_label or "",
        rec.payload.hex() if rec.payload else "",
    ]


def write_csv(records: Iterable[PacketRecord], stream: IO[str]) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS)
    n = 0
    for rec in records:
        writer.writerow(format_row(rec))
        n += 1
    return n
