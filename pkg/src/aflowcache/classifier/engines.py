"""Identification engines behind the aggregate-flow adapter.

An engine sees the packets of one connection until it returns a result, and
reports an abstract work-unit cost per packet it inspects.  The pipeline
never consults an engine again for a connection once it has answered.
"""

from __future__ import annotations

import abc
import re
from dataclasses import dataclass
from typing import IO, Iterable, Mapping

from ..errors import InvalidConfig, MissingPayload, MissingTruthLabel
from ..flow import (UNKNOWN, ConnectionRecord, IdentificationResult, PacketRecord,
                    TransportProto, validate_label)

DEFAULT_MAX_PACKETS = 10
DEFAULT_SCAN_BYTES = 256


class Engine(abc.ABC):
    name = "engine"

    @abc.abstractmethod
    def identify(self, conn: ConnectionRecord, packet: PacketRecord) -> IdentificationResult | None:
        """Inspect one more packet of ``conn``; return a result once decided."""

    @abc.abstractmethod
    def cost(self, packet: PacketRecord) -> float:
        """Work units spent inspecting ``packet``."""

    def check_trace(self, records: Iterable[PacketRecord]) -> None:
        """Fail early if the trace lacks what this engine needs."""


class OracleEngine(Engine):
    """Returns the trace's ground-truth label on the first packet."""

    name = "oracle"

    def identify(self, conn, packet):
        label = packet.truth_label or conn.truth_label
        if label is None:
            raise MissingTruthLabel(f"oracle engine needs truth labels; none on {packet.tuple}")
        return IdentificationResult(label, cacheable=label != UNKNOWN)

    def cost(self, packet):
        return 1.0

    def check_trace(self, records):
        for rec in records:
            if rec.truth_label is None:
                raise MissingTruthLabel(f"oracle engine needs truth labels; none at ts={rec.ts:.6f}")


@dataclass(frozen=True)
class PortRule:
    label: str
    cacheable: bool = True


DEFAULT_PORT_TABLE: dict[tuple[TransportProto, int], PortRule] = {
    (TransportProto.TCP, 20): PortRule("ftp-data", False),
    (TransportProto.TCP, 21): PortRule("ftp"),
    (TransportProto.TCP, 22): PortRule("ssh"),
    (TransportProto.TCP, 25): PortRule("smtp"),
    (TransportProto.TCP, 80): PortRule("http"),
    (TransportProto.TCP, 110): PortRule("pop3"),
    (TransportProto.TCP, 143): PortRule("imap"),
    (TransportProto.TCP, 443): PortRule("tls"),
    (TransportProto.TCP, 6881): PortRule("bittorrent"),
    (TransportProto.TCP, 8080): PortRule("http"),
    (TransportProto.UDP, 53): PortRule("dns"),
    (TransportProto.UDP, 123): PortRule("ntp"),
    (TransportProto.UDP, 5060): PortRule("sip"),
}


def load_port_table(stream: IO[str]) -> dict[tuple[TransportProto, int], PortRule]:
    """Parse ``proto,port,label,cacheable`` lines (``#`` starts a comment)."""
    table = {}
    for lineno, line in enumerate(stream, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise InvalidConfig(f"port table line {lineno}: expected proto,port,label,cacheable")
        proto, port, label, cacheable = parts
        try:
            key = (TransportProto.parse(proto), int(port))
            validate_label(label)
        except ValueError as exc:
            raise InvalidConfig(f"port table line {lineno}: {exc}") from None
        if cacheable.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise InvalidConfig(f"port table line {lineno}: cacheable must be true or false")
        table[key] = PortRule(label, cacheable.lower() in ("true", "1", "yes"))
    return table


class PortTableEngine(Engine):
    """Classifies by the connection's server port."""

    name = "ports"

    def __init__(self, table: Mapping[tuple[TransportProto, int], PortRule] | None = None):
        self.table = dict(DEFAULT_PORT_TABLE if table is None else table)

    def identify(self, conn, packet):
        server = conn.key.server
        rule = self.table.get((server.proto, server.port))
        if rule is None:
            return IdentificationResult(UNKNOWN, cacheable=False, confidence=0.0)
        return IdentificationResult(rule.label, cacheable=rule.cacheable, confidence=0.5)

    def cost(self, packet):
        return 1.0


# Patterns in the style of L7-filter protocol definitions; matched
# case-insensitively against the start of each inspected payload.
DEFAULT_SIGNATURES: tuple[tuple[str, str], ...] = (
    ("http", r"^(GET|POST|HEAD|PUT|DELETE|OPTIONS) [\x09-\x0d -~]* HTTP/1\.[01]"),
    ("http", r"^HTTP/1\.[01] [1-5][0-9][0-9]"),
    ("ssh", r"^SSH-[12]\.[0-9]"),
    ("tls", r"^\x16\x03[\x00-\x04]..\x01"),
    ("bittorrent", r"^\x13BitTorrent protocol"),
    ("smtp", r"^220[\x09-\x0d -~]*(E?SMTP|mail)"),
    ("ftp", r"^220[\x09-\x0d -~]*ftp"),
    ("dns", r"^..[\x00-\x01\x80-\x81][\x00-\x0f\x80-\x8f]\x00[\x01-\x10]\x00[\x00-\x10]\x00[\x00-\x10]\x00[\x00-\x10]"),
)


def compile_signature(pattern: str) -> re.Pattern:
    """Compile a signature over raw bytes; ``\\xHH`` escapes address byte values."""
    try:
        return re.compile(pattern.encode("latin-1"), re.IGNORECASE | re.DOTALL)
    except (re.error, UnicodeEncodeError) as exc:
        raise InvalidConfig(f"bad signature pattern {pattern!r}: {exc}") from None


def load_signatures(stream: IO[str]) -> list[tuple[str, str]]:
    """Parse ``label<TAB>pattern`` lines (``#`` at line start is a comment)."""
    sigs = []
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise InvalidConfig(f"signature line {lineno}: expected label<TAB>pattern")
        label, pattern = line.split("\t", 1)
        try:
            validate_label(label.strip())
        except ValueError as exc:
            raise InvalidConfig(f"signature line {lineno}: {exc}") from None
        compile_signature(pattern)
        sigs.append((label.strip(), pattern))
    return sigs


class SignatureEngine(Engine):
    """Payload signature matcher, the stand-in for a DPI engine.

    Scans the first ``scan_bytes`` of each of the first ``max_packets``
    packets of a connection against an ordered signature list and answers
    with the first match, or ``unknown`` after ``max_packets`` packets.
    Cost is the number of payload bytes scanned.
    """

    name = "signature"

    def __init__(
        self,
        signatures: Iterable[tuple[str, str]] | None = None,
        max_packets: int = DEFAULT_MAX_PACKETS,
        scan_bytes: int = DEFAULT_SCAN_BYTES,
        noncacheable: Iterable[str] = ("ftp-data", "sip-media"),
    ):
        if max_packets < 1 or scan_bytes < 1:
            raise InvalidConfig("max_packets and scan_bytes must be >= 1")
        self.signatures = [(validate_label(label), compile_signature(p))
                           for label, p in (DEFAULT_SIGNATURES if signatures is None else signatures)]
        self.max_packets = max_packets
        self.scan_bytes = scan_bytes
        self.noncacheable = frozenset(noncacheable)

    def _data(self, packet: PacketRecord) -> bytes:
        if packet.payload is None:
            if packet.payload_len > 0:
                raise MissingPayload(
                    f"signature engine needs payload bytes; header-only packet at ts={packet.ts:.6f}"
                )
            return b""
        return packet.payload[: self.scan_bytes]

    def match(self, data: bytes) -> str | None:
        for label, rx in self.signatures:
            if rx.match(data):
                return label
        return None

    def identify(self, conn, packet):
        data = self._data(packet)
        label = self.match(data) if data else None
        if label is not None:
            return IdentificationResult(label, cacheable=label not in self.noncacheable)
        if conn.engine_packets >= self.max_packets:
            return IdentificationResult(UNKNOWN, cacheable=False, confidence=0.0)
        return None

    def cost(self, packet):
        return float(min(packet.payload_len if packet.payload is None else len(packet.payload),
                         self.scan_bytes))

    def check_trace(self, records):
        for rec in records:
            if rec.payload is None and rec.payload_len > 0:
                raise MissingPayload(
                    "signature engine needs payload bytes but the trace is header-only "
                    f"(first header-only packet at ts={rec.ts:.6f})"
                )


def make_engine(name: str, signatures=None, port_table=None, **kwargs) -> Engine:
    name = name.lower()
    if name == "oracle":
        return OracleEngine()
    if name in ("ports", "port", "port_table", "port-table"):
        return PortTableEngine(port_table)
    if name in ("signature", "signatures", "dpi"):
        return SignatureEngine(signatures, **kwargs)
    raise InvalidConfig(f"unknown engine {name!r}; choose oracle, ports or signature")
