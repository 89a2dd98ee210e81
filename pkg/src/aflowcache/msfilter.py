"""Multistage filter gating admission into the aggregate-flow cache.

``d`` stages of ``b`` counters each.  Every observation increments one
counter per stage; a key is admitted once all of its counters reach the
threshold ``T``.  Counters only ever over-count (collisions), so a key seen
``T`` times since the last reset is always admitted.
"""

from __future__ import annotations

import array
import enum
import hashlib
from dataclasses import dataclass
from typing import Hashable

from .errors import DomainError, InvalidConfig
from .flow import key_bytes

COUNTER_MAX = 0xFFFF
_DIGEST_BITS = 512
_MEMO_LIMIT = 1 << 16


class Decision(enum.Enum):
    ADMIT = "admit"
    HOLD = "hold"


@dataclass(frozen=True)
class FilterConfig:
    d: int = 4
    b: int = 4096
    T: int = 2
    reset_period: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise InvalidConfig(f"filter needs at least one stage, got d={self.d}")
        if self.b < 2 or self.b & (self.b - 1):
            raise InvalidConfig(f"counters per stage must be a power of two >= 2, got b={self.b}")
        if not 1 <= self.T <= COUNTER_MAX - 1:
            raise InvalidConfig(f"threshold must lie in [1, {COUNTER_MAX - 1}], got T={self.T}")
        if self.reset_period < 0:
            raise InvalidConfig("reset_period must be >= 0")
        if self.d * (self.b.bit_length() - 1) > _DIGEST_BITS:
            raise InvalidConfig(f"d * log2(b) must not exceed {_DIGEST_BITS} hash bits")


@dataclass
class FilterStats:
    observations: int = 0
    admits: int = 0
    holds: int = 0
    resets: int = 0


class MultistageFilter:
    """Parallel hashed counter stages with a shared admission threshold.

    One keyed 512-bit hash is computed per observation and sliced into ``d``
    disjoint ``log2(b)``-bit indices, so stage ``i`` always sees the same
    index for a key regardless of how many stages are configured.
    """

    def __init__(self, config: FilterConfig | None = None):
        self.config = config or FilterConfig()
        self._bits = self.config.b.bit_length() - 1
        self._mask = self.config.b - 1
        self._shifts = [i * self._bits for i in range(self.config.d)]
        self._hkey = self.config.seed.to_bytes(8, "little", signed=self.config.seed < 0)
        self.counters = [array.array("H", bytes(2 * self.config.b)) for _ in range(self.config.d)]
        self.observations = 0
        self.last_estimate = 0
        self.stats = FilterStats()
        self._memo: dict = {}

    def indices(self, key: Hashable) -> list[int]:
        idx = self._memo.get(key)
        if idx is None:
            h = int.from_bytes(
                hashlib.blake2b(key_bytes(key), digest_size=64, key=self._hkey).digest(), "little"
            )
            mask = self._mask
            idx = [(h >> shift) & mask for shift in self._shifts]
            if len(self._memo) >= _MEMO_LIMIT:
                self._memo.clear()
            self._memo[key] = idx
        return idx

    def observe(self, key: Hashable) -> Decision:
        """Count one observation of ``key`` and decide admission.

        The key's post-increment count estimate (minimum over stages) is left
        in :attr:`last_estimate`.
        """
        low = COUNTER_MAX
        for stage, idx in zip(self.counters, self.indices(key)):
            c = stage[idx]
            if c < COUNTER_MAX:
                c += 1
                stage[idx] = c
            if c < low:
                low = c
        admit = low >= self.config.T
        self.last_estimate = low
        self.observations += 1
        self.stats.observations += 1
        if admit:
            self.stats.admits += 1
        else:
            self.stats.holds += 1
        period = self.config.reset_period
        if period and self.observations >= period:
            self.reset()
        return Decision.ADMIT if admit else Decision.HOLD

    def would_admit(self, key: Hashable) -> bool:
        """True if every counter of ``key`` already reaches the threshold (no update)."""
        T = self.config.T
        return all(stage[idx] >= T for stage, idx in zip(self.counters, self.indices(key)))

    def estimate(self, key: Hashable) -> int:
        return min(stage[idx] for stage, idx in zip(self.counters, self.indices(key)))

    def reset(self) -> None:
        for stage in self.counters:
            stage[:] = array.array("H", bytes(2 * self.config.b))
        if self.observations:
            self.stats.resets += 1
        self.observations = 0

    def stage_strength(self, n_obs: int | None = None) -> float:
        """``T * b / N``: threshold over the mean counter value."""
        n = self.observations if n_obs is None else n_obs
        if n <= 0:
            return float("inf")
        return self.config.T * self.config.b / n


def false_positive_bound(d: int, k: float, f_over_T: float = 0.0) -> float:
    """Upper bound on the chance that a key of frequency f passes all d stages.

    Evaluates ``((1/k) * 1/(1 - f/T)) ** d`` clamped to [0, 1].  At ``f = 0``
    with ``k <= 1`` the bound is vacuous and 1.0 is returned.
    """
    if d < 1:
        raise DomainError("d must be >= 1")
    if k <= 0:
        raise DomainError("stage strength k must be positive")
    if f_over_T < 0:
        raise DomainError("f/T must be non-negative")
    if f_over_T == 0 and k <= 1:
        return 1.0
    if f_over_T > 1 - 1 / k:
        raise DomainError(f"bound only holds for f/T <= 1 - 1/k = {1 - 1 / k:.6g}, got {f_over_T}")
    return min(1.0, max(0.0, ((1.0 / k) / (1.0 - f_over_T)) ** d))
