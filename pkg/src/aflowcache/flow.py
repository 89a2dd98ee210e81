"""Domain types shared by every module: endpoints, connections, aggregate-flow keys.

An aggregate-flow is the set of connections that share one server endpoint
(server IP, server port, transport protocol).  Connections are tracked under
a direction-independent canonical five-tuple.
"""

from __future__ import annotations

import enum
import re
import socket
import struct
from dataclasses import dataclass, field
from typing import Hashable

from .errors import InvalidConfig, UnsupportedProtocol

UNKNOWN = "unknown"

_LABEL_RE = re.compile(r"^[a-z0-9][a-z0-9._+-]{0,31}$")

# TCP flag bits
FIN = 0x01
SYN = 0x02
RST = 0x04
PSH = 0x08
ACK = 0x10

FLAG_CHARS = {"S": SYN, "A": ACK, "F": FIN, "R": RST, "P": PSH}

# Registered services above 1023 that are still treated as the server side.
DEFAULT_WELL_KNOWN_PORTS = frozenset(
    {1080, 1433, 1521, 1723, 1935, 3128, 3306, 3389, 5060, 5222, 5432, 6379,
     6881, 8000, 8080, 8443, 8888, 9090, 27017}
)


class TransportProto(enum.IntEnum):
    TCP = 6
    UDP = 17

    @classmethod
    def parse(cls, value) -> TransportProto:
        if isinstance(value, TransportProto):
            return value
        if isinstance(value, int):
            try:
                return cls(value)
            except ValueError:
                raise UnsupportedProtocol(f"IP protocol {value} is not TCP or UDP") from None
        name = str(value).strip().upper()
        if name in cls.__members__:
            return cls[name]
        raise UnsupportedProtocol(f"protocol {value!r} is not TCP or UDP")

    @property
    def token(self) -> str:
        return self.name.lower()


def ip_to_int(ip: str | int) -> int:
    if isinstance(ip, int):
        if not 0 <= ip <= 0xFFFFFFFF:
            raise ValueError(f"IPv4 address out of range: {ip}")
        return ip
    try:
        return struct.unpack("!I", socket.inet_pton(socket.AF_INET, ip))[0]
    except OSError:
        raise ValueError(f"not an IPv4 address: {ip!r}") from None


def ip_to_str(ip: int) -> str:
    return socket.inet_ntoa(struct.pack("!I", ip))


def validate_label(label: str) -> str:
    """Return ``label`` if it is a well-formed application label, else raise."""
    if not isinstance(label, str) or not _LABEL_RE.match(label):
        raise ValueError(
            f"invalid application label {label!r}: expected 1-32 lowercase ASCII characters"
        )
    return label


def parse_flags(text: str) -> int:
    flags = 0
    for ch in text.strip().upper():
        try:
            flags |= FLAG_CHARS[ch]
        except KeyError:
            raise ValueError(f"unknown TCP flag character {ch!r}") from None
    return flags


def format_flags(flags: int) -> str:
    return "".join(ch for ch, bit in FLAG_CHARS.items() if flags & bit)


@dataclass(frozen=True, slots=True, order=True)
class Endpoint:
    ip: int
    port: int
    proto: TransportProto

    def __post_init__(self):
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")

    @classmethod
    def of(cls, ip: str | int, port: int, proto) -> Endpoint:
        return cls(ip_to_int(ip), int(port), TransportProto.parse(proto))

    def __str__(self) -> str:
        return f"{ip_to_str(self.ip)}:{self.port}/{self.proto.token}"


@dataclass(frozen=True, slots=True, order=True)
class AggregateFlowKey:
    """Identity of an aggregate-flow: the server endpoint of its connections."""

    server: Endpoint

    @classmethod
    def of(cls, ip: str | int, port: int, proto) -> AggregateFlowKey:
        return cls(Endpoint.of(ip, port, proto))

    def to_bytes(self) -> bytes:
        s = self.server
        return struct.pack("!IHB", s.ip, s.port, int(s.proto))

    def __str__(self) -> str:
        return str(self.server)


def key_bytes(key: Hashable) -> bytes:
    """Stable byte serialization used for hashing and deterministic tie-breaks."""
    if isinstance(key, AggregateFlowKey):
        return key.to_bytes()
    if isinstance(key, bytes):
        return key
    if isinstance(key, str):
        return key.encode("utf-8")
    if isinstance(key, int):
        return key.to_bytes(8, "big", signed=True)
    return repr(key).encode("utf-8")


@dataclass(frozen=True, slots=True)
class FiveTuple:
    src: Endpoint
    dst: Endpoint

    def __post_init__(self):
        if self.src.proto != self.dst.proto:
            raise ValueError("both endpoints of a five-tuple must use the same protocol")

    @property
    def proto(self) -> TransportProto:
        return self.src.proto

    def reversed(self) -> FiveTuple:
        return FiveTuple(self.dst, self.src)

    def __str__(self) -> str:
        return (f"{ip_to_str(self.src.ip)}:{self.src.port}-"
                f"{ip_to_str(self.dst.ip)}:{self.dst.port}/{self.proto.token}")


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One observed packet.

    ``payload_len`` is the transport payload length on the wire; ``payload``
    holds the captured prefix of it (``None`` for header-only traces).
    """

    ts: float
    tuple: FiveTuple
    tcp_flags: int = 0
    payload_len: int = 0
    payload: bytes | None = None
    truth_label: str | None = None

    def __post_init__(self):
        if self.payload is not None and len(self.payload) > self.payload_len:
            raise ValueError("captured payload is longer than payload_len")
        if self.payload_len < 0:
            raise ValueError("payload_len must be non-negative")


@dataclass(frozen=True, slots=True)
class IdentificationResult:
    label: str
    cacheable: bool = True
    confidence: float = 1.0

    def __post_init__(self):
        validate_label(self.label)
        if self.label == UNKNOWN and self.cacheable:
            object.__setattr__(self, "cacheable", False)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


class ConnState(enum.Enum):
    PENDING = "pending"
    LABELED = "labeled"
    SAMPLED = "sampled"


@dataclass(slots=True)
class ConnectionRecord:
    tuple: FiveTuple
    key: AggregateFlowKey
    first_ts: float
    last_ts: float
    label: str | None = None
    state: ConnState = ConnState.PENDING
    packets_seen: int = 0
    bytes_seen: int = 0
    source: str | None = None  # "cache" or "engine" once labeled
    truth_label: str | None = None
    sampled: bool = False
    engine_packets: int = 0
    engine_done: bool = False
    fin_mask: int = 0  # bit 0: FIN from canonical src, bit 1: from canonical dst
    reset: bool = False
    engine_state: dict = field(default_factory=dict)

    @property
    def closed(self) -> bool:
        return self.reset or self.fin_mask == 0b11


def canonical_tuple(t: FiveTuple) -> FiveTuple:
    """Direction-independent form: the smaller (ip, port) endpoint comes first."""
    if (t.src.ip, t.src.port) <= (t.dst.ip, t.dst.port):
        return t
    return FiveTuple(t.dst, t.src)


def aggregate_key(
    packet: PacketRecord,
    prior_state: ConnectionRecord | None = None,
    well_known_ports: frozenset[int] = DEFAULT_WELL_KNOWN_PORTS,
) -> AggregateFlowKey:
    """Server endpoint of the connection ``packet`` belongs to.

    An existing connection keeps the key chosen at creation.  For a new one:
    a pure SYN points at the server; otherwise if exactly one side uses a
    port below 1024 (or a configured well-known port) that side is the
    server; otherwise the destination of the first packet is.
    """
    if prior_state is not None:
        return prior_state.key
    src, dst = packet.tuple.src, packet.tuple.dst
    if not isinstance(src.proto, TransportProto):
        raise UnsupportedProtocol(f"unsupported protocol {src.proto!r}")
    if src.proto is TransportProto.TCP and packet.tcp_flags & SYN and not packet.tcp_flags & ACK:
        return AggregateFlowKey(dst)
    src_known = src.port < 1024 or src.port in well_known_ports
    dst_known = dst.port < 1024 or dst.port in well_known_ports
    if src_known and not dst_known:
        return AggregateFlowKey(src)
    return AggregateFlowKey(dst)


def parse_port_set(text: str) -> frozenset[int]:
    try:
        ports = frozenset(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise InvalidConfig(f"bad port list {text!r}") from None
    if any(not 0 <= p <= 0xFFFF for p in ports):
        raise InvalidConfig(f"port out of range in {text!r}")
    return ports
