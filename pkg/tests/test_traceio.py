import io
import struct

import numpy as np
import pytest

from aflowcache.errors import (BadMagic, InvalidConfig, OutOfOrder, SchemaMismatch, TruncatedHeader,
                               UnsupportedLinkType)
from aflowcache.flow import SYN, PacketRecord
from aflowcache.locality import rank_frequency, zipf_fit
from aflowcache.traceio import (SyntheticConfig, connection_references, generate_synthetic,
                                load_trace, read_csv, read_pcap, reorder, save_trace, scramble_trace,
                                synthetic_references, write_csv, write_pcap)
from aflowcache.traceio.csvio import COLUMNS
from aflowcache.traceio.synthetic import connection_groups

from conftest import TCP, UDP, pkt

HEADER = ",".join(COLUMNS) + "\n"


def csv_records(body: str):
    return read_csv(io.StringIO(HEADER + body))


# CSV ------------------------------------------------------------------------

def test_csv_syn_row():
    (rec,), stats = csv_records("0.000000,10.0.0.5,51000,93.184.216.34,80,tcp,60,S,,\n")
    assert rec.tcp_flags == SYN and rec.payload is None and rec.truth_label is None
    assert rec.payload_len == 60 and rec.ts == 0.0
    assert stats.records == 1


def test_csv_icmp_row_skipped_and_counted():
    recs, stats = csv_records("0.0,10.0.0.5,0,10.0.0.6,0,icmp,0,,,\n"
                              "0.1,10.0.0.5,53001,8.8.8.8,53,udp,30,,dns,\n")
    assert len(recs) == 1 and stats.skipped["non_tcp_udp"] == 1


def test_csv_bad_row_reports_line_number():
    recs, stats = csv_records("0.0,10.0.0.5,1,10.0.0.6,2,tcp,0,S,,\n"
                              "oops,10.0.0.5,1,10.0.0.6,2,tcp,0,S,,\n")
    assert len(recs) == 1 and stats.skipped["parse_error"] == 1
    assert "line 3" in stats.errors[0]


def test_csv_header_mismatch():
    with pytest.raises(SchemaMismatch):
        read_csv(io.StringIO("a,b,c\n1,2,3\n"))
    with pytest.raises(SchemaMismatch):
        read_csv(io.StringIO(""))


def test_csv_roundtrip_is_byte_identical(small_trace):
    buf = io.StringIO()
    write_csv(small_trace, buf)
    text = buf.getvalue()
    recs, stats = read_csv(io.StringIO(text))
    assert recs == small_trace and not stats.skipped
    again = io.StringIO()
    write_csv(recs, again)
    assert again.getvalue() == text


def test_csv_reorders_small_jitter_and_rejects_large():
    body = ("1.0,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n"
            "0.5,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n"
            "1.2,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n")
    recs, _ = csv_records(body)
    assert [r.ts for r in recs] == [0.5, 1.0, 1.2]
    with pytest.raises(OutOfOrder):
        csv_records("5.0,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n"
                    "5.0,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n"
                    "9.0,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n"
                    "1.0,10.0.0.1,1,10.0.0.2,2,udp,0,,,\n")


def test_reorder_is_stable_for_equal_timestamps():
    a = pkt(1.0, "10.0.0.1", 1, "10.0.0.2", 2, UDP, label="dns")
    b = pkt(1.0, "10.0.0.1", 3, "10.0.0.2", 4, UDP, label="dns")
    assert list(reorder([a, b])) == [a, b]


# pcap -----------------------------------------------------------------------

def eth_ipv4_udp(src, dst, sport, dport, payload=b"", frag=0):
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0) + payload
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(udp), 0, frag, 64, 17, 0,
                     bytes(src), bytes(dst))
    return b"\x00" * 12 + b"\x08\x00" + ip + udp


def eth_ipv4_tcp(src, dst, sport, dport, flags):
    tcp = struct.pack("!HHIIHHHH", sport, dport, 0, 0, (5 << 12) | flags, 1024, 0, 0)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 40, 0, 0, 64, 6, 0, bytes(src), bytes(dst))
    return b"\x00" * 12 + b"\x08\x00" + ip + tcp


def arp_frame():
    return b"\xff" * 6 + b"\x00" * 6 + b"\x08\x06" + b"\x00" * 28


def pcap_bytes(frames, order="<", magic=0xA1B2C3D4):
    out = struct.pack(order + "IHHiIII", magic, 2, 4, 0, 0, 65535, 1)
    for sec, frac, frame in frames:
        out += struct.pack(order + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


def test_pcap_single_udp_packet_timestamp():
    frame = eth_ipv4_udp([10, 0, 0, 5], [8, 8, 8, 8], 53001, 53, b"abcd")
    (rec,), stats = read_pcap(pcap_bytes([(1_300_000_000, 250_000, frame)]))
    assert rec.ts == 1_300_000_000 + 250_000 / 1e6
    assert rec.tuple.proto is UDP and rec.tuple.dst.port == 53
    assert rec.payload == b"abcd" and rec.payload_len == 4


def test_pcap_byte_swapped_magic_parses_identically():
    frames = [(10, 5, eth_ipv4_udp([10, 0, 0, 5], [8, 8, 8, 8], 53001, 53, b"q")),
              (11, 7, eth_ipv4_tcp([10, 0, 0, 5], [1, 2, 3, 4], 50000, 80, SYN))]
    le, _ = read_pcap(pcap_bytes(frames, "<"))
    be, _ = read_pcap(pcap_bytes(frames, ">"))
    assert le == be and len(le) == 2


def test_pcap_nanosecond_magic():
    frame = eth_ipv4_udp([10, 0, 0, 5], [8, 8, 8, 8], 53001, 53)
    (rec,), _ = read_pcap(pcap_bytes([(3, 123_456_789, frame)], magic=0xA1B23C4D))
    assert rec.ts == pytest.approx(3.123456789, abs=1e-9)


def test_pcap_skips_arp_and_counts_it():
    frames = [(i, 0, eth_ipv4_tcp([10, 0, 0, 5], [1, 2, 3, 4], 50000 + i, 80, SYN)) for i in range(3)]
    frames.insert(1, (0, 5, arp_frame()))
    recs, stats = read_pcap(pcap_bytes(frames))
    assert len(recs) == 3 and stats.skipped["non_ipv4"] == 1


def test_pcap_skips_fragments():
    frames = [(0, 0, eth_ipv4_udp([10, 0, 0, 5], [8, 8, 8, 8], 1, 53, frag=0x2000)),
              (0, 1, eth_ipv4_udp([10, 0, 0, 5], [8, 8, 8, 8], 1, 53, frag=0x0010))]
    recs, stats = read_pcap(pcap_bytes(frames))
    assert recs == [] and stats.skipped["fragment"] == 2


def test_pcap_errors():
    with pytest.raises(BadMagic):
        read_pcap(b"\x00\x01\x02\x03" + b"\x00" * 20)
    with pytest.raises(TruncatedHeader):
        read_pcap(struct.pack("<I", 0xA1B2C3D4) + b"\x00" * 4)
    with pytest.raises(UnsupportedLinkType):
        read_pcap(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101))
    good = pcap_bytes([(0, 0, eth_ipv4_udp([1, 1, 1, 1], [2, 2, 2, 2], 1, 53))])
    with pytest.raises(TruncatedHeader):
        read_pcap(good[:-3])


def strip_truth(records):
    return [PacketRecord(r.ts, r.tuple, r.tcp_flags, r.payload_len, r.payload, None) for r in records]


@pytest.mark.parametrize("order", ["<", ">"])
@pytest.mark.parametrize("ns", [False, True])
def test_pcap_roundtrip(small_trace, order, ns):
    buf = io.BytesIO()
    write_pcap(small_trace, buf, nanosecond=ns, byteorder=order)
    recs, stats = read_pcap(buf.getvalue())
    assert recs == strip_truth(small_trace) and not stats.skipped


def test_pcap_snaplen_keeps_wire_length(small_trace):
    buf = io.BytesIO()
    write_pcap(small_trace, buf, snaplen=14 + 20 + 20 + 8)
    recs, _ = read_pcap(buf.getvalue())
    for orig, got in zip(small_trace, recs):
        assert got.payload_len == orig.payload_len
        if orig.payload and orig.tuple.proto is TCP:
            assert got.payload == orig.payload[:8]


def test_file_roundtrip_both_formats(tmp_path, small_trace):
    for name in ("t.csv", "t.pcap"):
        path = tmp_path / name
        save_trace(small_trace, path)
        recs, _ = load_trace(path)
        expected = small_trace if name.endswith("csv") else strip_truth(small_trace)
        assert recs == expected


# synthetic ------------------------------------------------------------------

def test_uniform_popularity_at_alpha_zero():
    cfg = SyntheticConfig(n_flows=10, alpha=0.0, n_connections=100_000, seed=3)
    counts = np.bincount(synthetic_references(cfg), minlength=10)
    expected = cfg.n_connections / 10
    sigma = np.sqrt(cfg.n_connections * 0.1 * 0.9)
    assert np.all(np.abs(counts - expected) <= 3 * sigma)


def test_zipf_generator_recovers_alpha():
    cfg = SyntheticConfig(n_flows=10_000, alpha=1.0, n_connections=100_000, seed=4)
    alpha, _ = zipf_fit(rank_frequency(synthetic_references(cfg).tolist()))
    assert alpha == pytest.approx(1.0, abs=0.05)


def test_generation_is_deterministic():
    cfg = SyntheticConfig(n_flows=30, n_connections=200, seed=9, correlation_p=0.5)
    a, b = io.StringIO(), io.StringIO()
    write_csv(generate_synthetic(cfg), a)
    write_csv(generate_synthetic(cfg), b)
    assert a.getvalue() == b.getvalue()


def test_references_do_not_depend_on_packet_options():
    base = SyntheticConfig(n_flows=30, n_connections=300, seed=2)
    other = SyntheticConfig(n_flows=30, n_connections=300, seed=2, packets_per_connection=3,
                            payload=False)
    assert connection_references(generate_synthetic(base)) == \
        connection_references(generate_synthetic(other))


def test_trace_structure(small_trace):
    ts = [r.ts for r in small_trace]
    assert ts == sorted(ts)
    groups = connection_groups(small_trace)
    assert len(groups) == 400
    for g in groups:
        first = g[0]
        if first.tuple.proto is TCP:
            assert first.tcp_flags == SYN
        labels = {r.truth_label for r in g}
        assert len(labels) == 1


def test_label_map_overrides():
    cfg = SyntheticConfig(n_flows=3, n_connections=50, seed=1, label_map=["dns", "dns", "ssh"])
    trace = generate_synthetic(cfg)
    assert {r.truth_label for r in trace} <= {"dns", "ssh"}
    with pytest.raises(InvalidConfig):
        SyntheticConfig(n_flows=3, label_map=["nope"])


@pytest.mark.parametrize("kwargs", [dict(alpha=-1), dict(n_flows=0), dict(correlation_p=1.0),
                                    dict(window=0), dict(packets_per_connection=0.5)])
def test_invalid_synthetic_config(kwargs):
    with pytest.raises(InvalidConfig):
        SyntheticConfig(**kwargs)


def test_scramble_preserves_reference_multiset(small_trace):
    before = connection_references(small_trace)
    after = connection_references(scramble_trace(small_trace, seed=1))
    assert rank_frequency(before).rows == rank_frequency(after).rows
    assert before != after


def test_scramble_keeps_timestamps_sorted(small_trace):
    out = scramble_trace(small_trace, seed=3)
    assert [r.ts for r in out] == sorted(r.ts for r in out)
    assert len(out) == len(small_trace)
    starts = sorted(g[0].ts for g in connection_groups(small_trace))
    assert sorted(g[0].ts for g in connection_groups(out)) == starts


def test_scramble_single_flow_trace():
    cfg = SyntheticConfig(n_flows=1, n_connections=40, seed=6)
    trace = generate_synthetic(cfg)
    assert connection_references(scramble_trace(trace, 5)) == connection_references(trace)
    assert len(set(connection_references(trace))) == 1
