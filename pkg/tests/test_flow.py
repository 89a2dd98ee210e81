import pytest
from hypothesis import given, strategies as st

from aflowcache.errors import UnsupportedProtocol
from aflowcache.flow import (ACK, FIN, SYN, UNKNOWN, AggregateFlowKey, Endpoint, FiveTuple,
                             IdentificationResult, PacketRecord, TransportProto, aggregate_key,
                             canonical_tuple, format_flags, ip_to_int, ip_to_str, parse_flags,
                             parse_port_set, validate_label)

from conftest import TCP, UDP, pkt, syn


def test_syn_destination_is_server():
    p = syn(0.0, "10.0.0.5", 51000, "93.184.216.34", 80)
    assert aggregate_key(p) == AggregateFlowKey.of("93.184.216.34", 80, "tcp")


def test_first_udp_packet_destination_is_server():
    p = pkt(0.0, "10.0.0.5", 53001, "8.8.8.8", 53, UDP)
    assert aggregate_key(p) == AggregateFlowKey.of("8.8.8.8", 53, UDP)


def test_midstream_well_known_port_side_is_server():
    p = pkt(0.0, "198.51.100.2", 443, "10.0.0.5", 50321, TCP, ACK)
    assert aggregate_key(p) == AggregateFlowKey.of("198.51.100.2", 443, TCP)


def test_syn_ack_is_not_treated_as_client_syn():
    p = pkt(0.0, "93.184.216.34", 80, "10.0.0.5", 51000, TCP, SYN | ACK)
    assert aggregate_key(p).server.port == 80


@pytest.mark.parametrize("sport,dport,expected", [
    (40000, 50000, 50000),   # neither well known: first destination
    (22, 80, 80),            # both well known: first destination
    (8080, 50000, 8080),     # configured well-known port above 1024
])
def test_direction_rule_table(sport, dport, expected):
    p = pkt(0.0, "10.1.1.1", sport, "10.2.2.2", dport, TCP, ACK)
    assert aggregate_key(p).server.port == expected


def test_custom_well_known_set():
    p = pkt(0.0, "10.1.1.1", 7000, "10.2.2.2", 50000, UDP)
    assert aggregate_key(p).server.port == 50000
    assert aggregate_key(p, well_known_ports=frozenset({7000})).server.port == 7000


def test_prior_state_keeps_key():
    from aflowcache.flow import ConnectionRecord
    first = syn(0.0, "10.0.0.5", 51000, "93.184.216.34", 80)
    conn = ConnectionRecord(canonical_tuple(first.tuple), aggregate_key(first), 0.0, 0.0)
    reply = pkt(0.1, "93.184.216.34", 80, "10.0.0.5", 51000, TCP, SYN | ACK)
    assert aggregate_key(reply, conn) == conn.key


def test_unsupported_protocol_rejected():
    with pytest.raises(UnsupportedProtocol):
        TransportProto.parse("icmp")
    with pytest.raises(UnsupportedProtocol):
        TransportProto.parse(1)


@pytest.mark.parametrize("a,b,expected", [
    (("10.0.0.5", 51000), ("93.184.216.34", 80), (("10.0.0.5", 51000), ("93.184.216.34", 80))),
    (("93.184.216.34", 80), ("10.0.0.5", 51000), (("10.0.0.5", 51000), ("93.184.216.34", 80))),
    (("10.0.0.5", 2), ("10.0.0.5", 1), (("10.0.0.5", 1), ("10.0.0.5", 2))),
])
def test_canonical_tuple_examples(a, b, expected):
    t = FiveTuple(Endpoint.of(*a, TCP), Endpoint.of(*b, TCP))
    c = canonical_tuple(t)
    assert (ip_to_str(c.src.ip), c.src.port) == expected[0]
    assert (ip_to_str(c.dst.ip), c.dst.port) == expected[1]


endpoints = st.builds(Endpoint, st.integers(0, 2**32 - 1), st.integers(0, 65535), st.just(TCP))


@given(endpoints, endpoints)
def test_canonical_tuple_idempotent_and_direction_free(a, b):
    t = FiveTuple(a, b)
    assert canonical_tuple(canonical_tuple(t)) == canonical_tuple(t)
    assert canonical_tuple(t) == canonical_tuple(t.reversed())


@given(endpoints, endpoints, st.integers(0, 31))
def test_aggregate_key_is_pure(a, b, flags):
    p = PacketRecord(1.0, FiveTuple(a, b), flags)
    assert aggregate_key(p) == aggregate_key(p)
    assert aggregate_key(p).server in (a, b)


def test_endpoint_validation():
    with pytest.raises(ValueError):
        Endpoint(1, 70000, TCP)
    with pytest.raises(ValueError):
        FiveTuple(Endpoint(1, 1, TCP), Endpoint(2, 2, UDP))
    assert ip_to_int("1.2.3.4") == 0x01020304
    with pytest.raises(ValueError):
        ip_to_int("1.2.3")


def test_packet_payload_not_longer_than_len():
    with pytest.raises(ValueError):
        pkt(0.0, "1.1.1.1", 1, "2.2.2.2", 2, length=2, payload=b"abc")


@pytest.mark.parametrize("label,ok", [("http", True), ("ftp-data", True), ("", False),
                                      ("HTTP", False), ("x" * 33, False), ("a b", False)])
def test_label_rules(label, ok):
    if ok:
        assert validate_label(label) == label
    else:
        with pytest.raises(ValueError):
            validate_label(label)


def test_unknown_result_is_never_cacheable():
    assert IdentificationResult(UNKNOWN, cacheable=True).cacheable is False
    assert IdentificationResult("http").cacheable is True
    with pytest.raises(ValueError):
        IdentificationResult("http", confidence=1.5)


def test_flag_text_roundtrip():
    assert parse_flags("SA") == SYN | ACK
    assert format_flags(SYN | ACK | FIN) == "SAF"
    assert parse_flags("") == 0
    with pytest.raises(ValueError):
        parse_flags("SX")


def test_port_set_parsing():
    assert parse_port_set("80, 8080") == frozenset({80, 8080})
    with pytest.raises(ValueError):
        parse_port_set("80,x")
