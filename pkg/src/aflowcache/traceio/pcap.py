"""Classic libpcap reader/writer (Ethernet / IPv4 / TCP|UDP only).

Truth labels have no place in a pcap file, so a write/read round trip keeps
everything except ``truth_label``.  Timestamps are kept at microsecond
(or nanosecond) resolution.
"""

from __future__ import annotations

import io
import struct
from typing import IO, Iterable, Iterator

from ..errors import BadMagic, TruncatedHeader, UnsupportedLinkType
from ..flow import Endpoint, FiveTuple, PacketRecord, TransportProto
from .common import REORDER_WINDOW, IngestStats, reorder

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETH_LEN = 14
ETHERTYPE_IPV4 = 0x0800

_MAGICS = {
    struct.pack("<I", MAGIC_US): ("<", 1e6, 6),
    struct.pack(">I", MAGIC_US): (">", 1e6, 6),
    struct.pack("<I", MAGIC_NS): ("<", 1e9, 9),
    struct.pack(">I", MAGIC_NS): (">", 1e9, 9),
}


def _read_exact(stream: IO[bytes], n: int, what: str) -> bytes | None:
    data = stream.read(n)
    if not data:
        return None
    if len(data) < n:
        raise TruncatedHeader(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def _decode(frame: bytes, ts: float, stats: IngestStats) -> PacketRecord | None:
    if len(frame) < ETH_LEN:
        stats.skip("truncated")
        return None
    (ethertype,) = struct.unpack_from("!H", frame, 12)
    if ethertype != ETHERTYPE_IPV4:
        stats.skip("non_ipv4")
        return None
    ip = frame[ETH_LEN:]
    if len(ip) < 20:
        stats.skip("truncated")
        return None
    ver_ihl, _, total_len, _, frag, _, proto, _, src, dst = struct.unpack_from("!BBHHHBBHII", ip)
    if ver_ihl >> 4 != 4:
        stats.skip("non_ipv4")
        return None
    ihl = (ver_ihl & 0x0F) * 4
    if frag & 0x3FFF:  # MF flag or nonzero offset
        stats.skip("fragment")
        return None
    if proto not in (6, 17):
        stats.skip("non_tcp_udp")
        return None
    l4 = ip[ihl:]
    if proto == 6:
        if len(l4) < 20:
            stats.skip("truncated")
            return None
        sport, dport, _, _, off_flags = struct.unpack_from("!HHIIH", l4)
        hlen = (off_flags >> 12) * 4
        flags = off_flags & 0xFF
        if len(l4) < hlen:
            stats.skip("truncated")
            return None
        payload_len = max(0, total_len - ihl - hlen)
        tproto = TransportProto.TCP
    else:
        if len(l4) < 8:
            stats.skip("truncated")
            return None
        sport, dport, ulen = struct.unpack_from("!HHH", l4)
        hlen, flags = 8, 0
        payload_len = max(0, min(ulen, total_len - ihl) - 8)
        tproto = TransportProto.UDP
    captured = l4[hlen:hlen + payload_len]
    payload = captured if captured else None
    stats.records += 1
    return PacketRecord(
        ts=ts,
        tuple=FiveTuple(Endpoint(src, sport, tproto), Endpoint(dst, dport, tproto)),
        tcp_flags=flags,
        payload_len=payload_len,
        payload=payload,
    )


def iter_pcap(stream: IO[bytes] | bytes, stats: IngestStats | None = None) -> Iterator[PacketRecord]:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    stats = stats if stats is not None else IngestStats()
    head = stream.read(24)
    if len(head) < 4 or head[:4] not in _MAGICS:
        raise BadMagic(f"not a classic pcap file (leading bytes {head[:4].hex()!r})")
    if len(head) < 24:
        raise TruncatedHeader("pcap global header shorter than 24 bytes")
    order, scale, digits = _MAGICS[head[:4]]
    _, _, _, _, snaplen, linktype = struct.unpack(order + "HHiIII", head[4:])
    if linktype & 0xFFFF != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"linktype {linktype} not supported (Ethernet only)")
    rec_hdr = struct.Struct(order + "IIII")
    while True:
        hdr = _read_exact(stream, 16, "pcap record header")
        if hdr is None:
            return
        sec, frac, incl, _orig = rec_hdr.unpack(hdr)
        frame = _read_exact(stream, incl, "pcap record body") if incl else b""
        if frame is None:
            raise TruncatedHeader("pcap record body missing")
        rec = _decode(frame, round(sec + frac / scale, digits), stats)
        if rec is not None:
            yield rec


def read_pcap(stream: IO[bytes] | bytes, reorder_window: float = REORDER_WINDOW):
    """Parse a pcap stream. Returns ``(records, stats)``."""
    stats = IngestStats()
    records = list(reorder(iter_pcap(stream, stats), reorder_window))
    return records, stats


def _checksum(header: bytes) -> int:
    s = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def encode_frame(rec: PacketRecord) -> tuple[bytes, int]:
    """Ethernet frame for ``rec`` plus its original (on-wire) length."""
    t = rec.tuple
    if t.proto is TransportProto.TCP:
        l4 = struct.pack("!HHIIHHHH", t.src.port, t.dst.port, 0, 0, (5 << 12) | rec.tcp_flags,
                         65535, 0, 0)
        proto = 6
    else:
        l4 = struct.pack("!HHHH", t.src.port, t.dst.port, 8 + rec.payload_len, 0)
        proto = 17
    total = 20 + len(l4) + rec.payload_len
    ip = struct.pack("!BBHHHBBHII", 0x45, 0, total, 0, 0x4000, 64, proto, 0, t.src.ip, t.dst.ip)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETHERTYPE_IPV4)
    headers = eth + ip + l4
    return headers + (rec.payload or b""), len(headers) + rec.payload_len


def write_pcap(
    records: Iterable[PacketRecord],
    stream: IO[bytes],
    snaplen: int = 65535,
    nanosecond: bool = False,
    byteorder: str = "<",
) -> int:
    magic = MAGIC_NS if nanosecond else MAGIC_US
    scale = 10**9 if nanosecond else 10**6
    stream.write(struct.pack(byteorder + "IHHiIII", magic, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
    n = 0
    for rec in records:
        frame, orig = encode_frame(rec)
        frame = frame[:snaplen]
        ticks = round(rec.ts * scale)
        sec, frac = divmod(ticks, scale)
        stream.write(struct.pack(byteorder + "IIII", sec, frac, len(frame), orig))
        stream.write(frame)
        n += 1
    return n
