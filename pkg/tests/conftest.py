import sys

import pytest

from aflowcache.flow import ACK, SYN, Endpoint, FiveTuple, PacketRecord, TransportProto
from aflowcache.traceio import SyntheticConfig, generate_synthetic

TCP, UDP = TransportProto.TCP, TransportProto.UDP


def pkt(ts, src, sport, dst, dport, proto=TCP, flags=0, length=0, payload=None, label=None):
    """Packet builder with dotted-quad addresses."""
    return PacketRecord(ts, FiveTuple(Endpoint.of(src, sport, proto), Endpoint.of(dst, dport, proto)),
                        flags, length, payload, label)


def syn(ts, src, sport, dst, dport, label=None):
    return pkt(ts, src, sport, dst, dport, TCP, SYN, 0, None, label)


@pytest.fixture(scope="session")
def small_trace():
    return generate_synthetic(SyntheticConfig(n_flows=50, alpha=1.0, n_connections=400, seed=11))


@pytest.fixture(scope="session")
def header_only_trace():
    return generate_synthetic(SyntheticConfig(n_flows=50, alpha=1.0, n_connections=300, seed=5,
                                              payload=False))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS):
            terminalreporter.write_line(line)


__all__ = ["pkt", "syn", "TCP", "UDP", "ACK", "SYN"]
