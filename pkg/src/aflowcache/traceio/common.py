from __future__ import annotations

import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from ..errors import OutOfOrder
from ..flow import PacketRecord

log = logging.getLogger(__name__)

REORDER_WINDOW = 1.0


@dataclass
class IngestStats:
    records: int = 0
    skipped: Counter = field(default_factory=Counter)
    errors: list[str] = field(default_factory=list)

    def skip(self, reason: str, message: str | None = None) -> None:
        self.skipped[reason] += 1
        if message is not None:
            log.warning(message)
            if len(self.errors) < 100:
                self.errors.append(message)

    def as_dict(self) -> dict:
        return {"records": self.records, "skipped": dict(sorted(self.skipped.items()))}


def reorder(records: Iterable[PacketRecord], window: float = REORDER_WINDOW) -> Iterator[PacketRecord]:
    """Stable-sort records whose timestamps jitter by at most ``window`` seconds.

    A record older than one already emitted means the disorder exceeds the
    window and raises :class:`OutOfOrder`.
    """
    heap: list = []
    newest = float("-inf")
    emitted = float("-inf")
    for seq, rec in enumerate(records):
        if rec.ts < emitted:
            raise OutOfOrder(
                f"record {seq} at ts={rec.ts:.6f} is more than {window}s older than the stream"
            )
        heapq.heappush(heap, (rec.ts, seq, rec))
        if rec.ts > newest:
            newest = rec.ts
        while heap and heap[0][0] <= newest - window:
            ts, _, out = heapq.heappop(heap)
            emitted = ts
            yield out
    while heap:
        yield heapq.heappop(heap)[2]
