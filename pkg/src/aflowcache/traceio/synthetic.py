"""Synthetic traces with controlled popularity and temporal correlation.

Each new connection picks an aggregate-flow by Zipf rank (probability
proportional to ``rank ** -alpha``), except that with probability
``correlation_p`` it re-references one of the last ``window`` distinct flows
instead.  The reference sequence, flow endpoints and packet details come
from separate child streams of one seed, so the reference sequence of a
config does not depend on packet-level options.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import InvalidConfig
from ..flow import (ACK, FIN, PSH, SYN, AggregateFlowKey, Endpoint, FiveTuple, PacketRecord,
                    TransportProto, canonical_tuple, validate_label)

# label -> (transport, server port, first payload bytes)
APPLICATIONS: dict[str, tuple[TransportProto, int, bytes]] = {
    "http": (TransportProto.TCP, 80, b"GET /index.html HTTP/1.1\r\nHost: www.example.com\r\n"
                                      b"User-Agent: synth\r\nAccept: */*\r\n\r\n"),
    "tls": (TransportProto.TCP, 443, b"\x16\x03\x01\x02\x00\x01\x00\x01\xfc\x03\x03"),
    "ssh": (TransportProto.TCP, 22, b"SSH-2.0-OpenSSH_8.9p1 Ubuntu-3\r\n"),
    "smtp": (TransportProto.TCP, 25, b"220 mail.example.com ESMTP Postfix\r\n"),
    "ftp": (TransportProto.TCP, 21, b"220 ProFTPD 1.3.5 Server (FTP) ready.\r\n"),
    "bittorrent": (TransportProto.TCP, 6881, b"\x13BitTorrent protocol\x00\x00\x00\x00\x00\x10\x00\x05"),
    "dns": (TransportProto.UDP, 53, b"\x1a\x2b\x01\x00\x00\x01\x00\x00\x00\x00\x00\x00"
                                    b"\x07example\x03com\x00\x00\x01\x00\x01"),
}
DEFAULT_APP_WEIGHTS = {"http": 0.4, "tls": 0.3, "dns": 0.1, "smtp": 0.05, "ssh": 0.05,
                       "bittorrent": 0.05, "ftp": 0.05}

CLIENT_PORT_BASE = 49152
CLIENT_PORTS = 16000
CLIENT_NET = 0x0A000000  # 10.0.0.0
SERVER_NET = 0x64400000  # 100.64.0.0/10


@dataclass(frozen=True)
class SyntheticConfig:
    n_flows: int = 1000
    alpha: float = 1.0
    n_connections: int = 10_000
    packets_per_connection: float = 10.0
    correlation_p: float = 0.0
    window: int = 256
    seed: int = 0
    label_map: Sequence[str] | Mapping[int, str] | None = None
    payload: bool = True
    payload_bytes: tuple[int, int] = (64, 512)
    mean_interarrival: float = 0.001
    mean_gap: float = 0.01
    start_ts: float = 0.0

    def __post_init__(self):
        if self.n_flows < 1:
            raise InvalidConfig(f"n_flows must be >= 1, got {self.n_flows}")
        if self.n_flows > 1 << 22:
            raise InvalidConfig("n_flows must fit in the 100.64.0.0/10 server range")
        if not self.alpha >= 0:
            raise InvalidConfig(f"alpha must be >= 0, got {self.alpha}")
        if self.n_connections < 0:
            raise InvalidConfig("n_connections must be >= 0")
        if self.n_connections > 255 * CLIENT_PORTS * 256:
            raise InvalidConfig("n_connections exceeds the synthetic client address space")
        if not 0 <= self.correlation_p < 1:
            raise InvalidConfig(f"correlation_p must lie in [0, 1), got {self.correlation_p}")
        if self.window < 1:
            raise InvalidConfig("window must be >= 1")
        if not self.packets_per_connection >= 1:
            raise InvalidConfig("packets_per_connection must be >= 1")
        lo, hi = self.payload_bytes
        if not 1 <= lo <= hi:
            raise InvalidConfig("payload_bytes must satisfy 1 <= low <= high")
        if self.mean_interarrival <= 0 or self.mean_gap <= 0:
            raise InvalidConfig("mean_interarrival and mean_gap must be positive")
        if self.label_map is not None:
            for label in self._labels_iter():
                try:
                    validate_label(label)
                except ValueError as exc:
                    raise InvalidConfig(str(exc)) from None
                if label not in APPLICATIONS:
                    raise InvalidConfig(
                        f"label {label!r} has no synthetic model; known: {', '.join(APPLICATIONS)}"
                    )

    def _labels_iter(self):
        if isinstance(self.label_map, Mapping):
            return self.label_map.values()
        return self.label_map


@dataclass
class FlowTable:
    """Server endpoint and application of every synthetic flow, by rank - 1."""

    endpoints: list[Endpoint]
    labels: list[str]
    keys: list[AggregateFlowKey] = field(init=False)

    def __post_init__(self):
        self.keys = [AggregateFlowKey(e) for e in self.endpoints]


def _streams(seed: int):
    flows, refs, packets = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(flows), np.random.default_rng(refs),
            np.random.default_rng(packets))


def zipf_probabilities(n: int, alpha: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def make_flows(config: SyntheticConfig) -> FlowTable:
    rng = _streams(config.seed)[0]
    n = config.n_flows
    apps = list(DEFAULT_APP_WEIGHTS)
    weights = np.array([DEFAULT_APP_WEIGHTS[a] for a in apps])
    drawn = rng.choice(len(apps), size=n, p=weights / weights.sum())
    labels = [apps[i] for i in drawn]
    if isinstance(config.label_map, Mapping):
        for rank, label in config.label_map.items():
            if not 1 <= rank <= n:
                raise InvalidConfig(f"label_map rank {rank} outside 1..{n}")
            labels[rank - 1] = label
    elif config.label_map is not None:
        if len(config.label_map) != n:
            raise InvalidConfig(f"label_map must have {n} entries, got {len(config.label_map)}")
        labels = list(config.label_map)
    hosts = rng.choice(1 << 22, size=n, replace=False)
    endpoints = []
    for host, label in zip(hosts, labels):
        proto, port, _ = APPLICATIONS[label]
        endpoints.append(Endpoint(SERVER_NET + int(host), port, proto))
    return FlowTable(endpoints, labels)


def synthetic_references(config: SyntheticConfig) -> np.ndarray:
    """Flow index (rank - 1) referenced by each connection, in arrival order."""
    rng = _streams(config.seed)[1]
    m = config.n_connections
    draws = rng.choice(config.n_flows, size=m, p=zipf_probabilities(config.n_flows, config.alpha))
    if config.correlation_p == 0 or m == 0:
        return draws.astype(np.int64)
    reuse = rng.random(m) < config.correlation_p
    picks = rng.integers(0, 1 << 30, size=m)
    out = np.empty(m, dtype=np.int64)
    window: list[int] = []
    members: set[int] = set()
    W = config.window
    for i in range(m):
        if reuse[i] and window:
            flow = window[int(picks[i]) % len(window)]
        else:
            flow = int(draws[i])
        out[i] = flow
        if flow in members:
            window.remove(flow)
        else:
            members.add(flow)
            if len(window) >= W:
                members.discard(window.pop(0))
        window.append(flow)
    return out


def synthetic_keys(config: SyntheticConfig) -> list[AggregateFlowKey]:
    flows = make_flows(config)
    return [flows.keys[i] for i in synthetic_references(config)]


def _client(i: int, proto: TransportProto) -> Endpoint:
    host, port = divmod(i, CLIENT_PORTS)
    return Endpoint(CLIENT_NET + 1 + host, CLIENT_PORT_BASE + port, proto)


def generate_synthetic(config: SyntheticConfig) -> list[PacketRecord]:
    """Packet-level trace for ``config``, sorted by timestamp.

    TCP connections open with a bare SYN and, with three or more packets,
    close with a FIN from each side.  The first data packet carries the
    application's opening bytes.  Timestamps are rounded to microseconds.
    """
    flows = make_flows(config)
    refs = synthetic_references(config)
    rng = _streams(config.seed)[2]
    m = len(refs)
    starts = config.start_ts + np.cumsum(rng.exponential(config.mean_interarrival, size=m))
    counts = rng.geometric(1.0 / config.packets_per_connection, size=m)
    lo, hi = config.payload_bytes
    events = []
    for i in range(m):
        flow = int(refs[i])
        server = flows.endpoints[flow]
        label = flows.labels[flow]
        proto, _, opening = APPLICATIONS[label]
        client = _client(i, proto)
        up, down = FiveTuple(client, server), FiveTuple(server, client)
        n = int(counts[i])
        gaps = rng.exponential(config.mean_gap, size=n)
        gaps[0] = 0.0
        times = np.round(starts[i] + np.cumsum(gaps), 6)
        sizes = rng.integers(lo, hi + 1, size=n)
        data_idx = 0
        for j in range(n):
            if proto is TransportProto.TCP:
                if j == 0:
                    flags, tup, plen = SYN, up, 0
                else:
                    tup = up if j % 2 == 1 else down
                    flags = ACK | PSH
                    if n >= 3 and j >= n - 2:
                        flags = ACK | FIN
                    plen = int(sizes[j])
            else:
                tup = up if j % 2 == 0 else down
                flags, plen = 0, int(sizes[j])
            payload = None
            if plen:
                if data_idx == 0:
                    plen = max(plen, len(opening))
                    body = opening + rng.bytes(plen - len(opening))
                else:
                    body = rng.bytes(plen)
                data_idx += 1
                payload = body if config.payload else None
            events.append((float(times[j]), i, j, PacketRecord(
                ts=float(times[j]), tuple=tup, tcp_flags=flags, payload_len=plen,
                payload=payload, truth_label=label)))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    return [e[3] for e in events]


def connection_groups(records: Iterable[PacketRecord]) -> list[list[PacketRecord]]:
    """Packets grouped per canonical five-tuple, in order of first appearance."""
    groups: dict[FiveTuple, list[PacketRecord]] = {}
    for rec in records:
        groups.setdefault(canonical_tuple(rec.tuple), []).append(rec)
    return list(groups.values())


def scramble_trace(records: Sequence[PacketRecord], seed: int) -> list[PacketRecord]:
    """Uniformly permute the order in which connections (and so flows) arrive.

    Connection start times are reassigned from the original sorted start-time
    sequence; each connection keeps its internal packet spacing and content,
    so the multiset of aggregate-flow references is unchanged.
    """
    groups = connection_groups(records)
    starts = [g[0].ts for g in groups]
    perm = np.random.default_rng(seed).permutation(len(groups))
    events = []
    for slot, src in enumerate(perm):
        group = groups[int(src)]
        shift = starts[slot] - group[0].ts
        for j, rec in enumerate(group):
            ts = round(rec.ts + shift, 6)
            events.append((ts, slot, j, PacketRecord(ts, rec.tuple, rec.tcp_flags, rec.payload_len,
                                                     rec.payload, rec.truth_label)))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    return [e[3] for e in events]
