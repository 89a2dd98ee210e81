"""Temporal-locality analysis of aggregate-flow reference streams.

Two sources of locality are separated here: long-term popularity (a
Zipf-like rank-frequency law, fitted by least squares in log-log space) and
short-term correlation (visible as a change in the stack-distance
distribution once the reference order is randomly permuted).
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyInput, InsufficientBins, InsufficientRanks
from .flow import key_bytes

DEFAULT_MIN_COUNT = 5


@dataclass(frozen=True)
class RankFrequencyTable:
    """``(rank, key, count)`` rows, rank 1 = most referenced key."""

    rows: tuple[tuple[int, Hashable, int], ...]
    total: int

    @classmethod
    def from_counts(cls, counts: Mapping[Hashable, int] | Sequence[int]) -> RankFrequencyTable:
        if not isinstance(counts, Mapping):
            counts = dict(enumerate(counts))
        items = sorted(counts.items(), key=lambda kv: (-kv[1], key_bytes(kv[0])))
        rows = tuple((i + 1, k, int(c)) for i, (k, c) in enumerate(items))
        return cls(rows, sum(c for _, _, c in rows))

    @property
    def counts(self) -> np.ndarray:
        return np.array([c for _, _, c in self.rows], dtype=np.int64)

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, len(self.rows) + 1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)


def rank_frequency(keys: Iterable[Hashable]) -> RankFrequencyTable:
    counts = Counter(keys)
    if not counts:
        raise EmptyInput("cannot rank an empty reference sequence")
    return RankFrequencyTable.from_counts(counts)


def _line_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of y on x and its standard error."""
    n = len(x)
    xm = x.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - y.mean())).sum()) / sxx
    intercept = y.mean() - slope * xm
    if n <= 2:
        return slope, 0.0
    resid = y - (intercept + slope * x)
    stderr = math.sqrt(float((resid ** 2).sum()) / (n - 2) / sxx)
    return slope, stderr


def zipf_fit(table: RankFrequencyTable, min_count: int = DEFAULT_MIN_COUNT) -> tuple[float, float]:
    """Fit ``count ~ rank ** -alpha``; returns ``(alpha, stderr)``.

    Only ranks whose count is at least ``min_count`` enter the fit; the
    low-count tail is dominated by sampling noise on a log scale.
    """
    counts = table.counts
    ranks = table.ranks
    keep = counts >= min_count
    if keep.sum() < 3:
        raise InsufficientRanks(
            f"need >= 3 ranks with count >= {min_count}, got {int(keep.sum())}"
        )
    slope, stderr = _line_fit(np.log10(ranks[keep]), np.log10(counts[keep]))
    alpha = -slope
    # A flat table can come out as -0.0 or a hair below zero.
    return max(alpha, 0.0), stderr


@dataclass
class StackDistances:
    """Per-reference stack distances; ``-1`` marks a first reference."""

    distances: np.ndarray

    @property
    def finite(self) -> np.ndarray:
        return self.distances[self.distances >= 0]

    @property
    def infinite(self) -> int:
        return int((self.distances < 0).sum())

    def histogram(self) -> dict[int, float]:
        finite = self.finite
        if len(finite) == 0:
            return {}
        values, counts = np.unique(finite, return_counts=True)
        total = counts.sum()
        return {int(v): float(c) / total for v, c in zip(values, counts)}


def stack_distances(keys: Iterable[Hashable]) -> StackDistances:
    """Number of distinct other keys referenced since each key's previous reference.

    Keeps the last-access positions of all keys in a sorted list.  The keys
    seen since position ``p`` are exactly the entries after ``p``, so one
    bisect gives the distance and the list stays sorted by appending ``t``.
    """
    last: dict[Hashable, int] = {}
    positions: list[int] = []
    out = []
    bisect_left = bisect.bisect_left
    for t, key in enumerate(keys):
        p = last.get(key)
        if p is None:
            out.append(-1)
        else:
            idx = bisect_left(positions, p)
            out.append(len(positions) - 1 - idx)
            del positions[idx]
        positions.append(t)
        last[key] = t
    return StackDistances(np.asarray(out, dtype=np.int64))


def log2_bins(histogram: Mapping[int, float], d_max: int | None = None):
    """Aggregate a distance histogram into power-of-two bins.

    Returns ``(midpoints, densities)`` for bins with nonzero mass, where
    density is bin mass divided by the number of integer distances it covers
    (the last bin is clipped at ``d_max``).
    """
    support = [d for d, p in histogram.items() if d >= 1 and p > 0]
    if not support:
        return np.array([]), np.array([])
    if d_max is None:
        d_max = max(support)
    masses: dict[int, float] = {}
    for d, p in histogram.items():
        if 1 <= d <= d_max and p > 0:
            k = int(d).bit_length() - 1
            masses[k] = masses.get(k, 0.0) + p
    mids, dens = [], []
    for k in sorted(masses):
        lo = 1 << k
        hi = min(2 * lo - 1, d_max)
        mids.append((lo + hi) / 2.0)
        dens.append(masses[k] / (hi - lo + 1))
    return np.array(mids), np.array(dens)


def slope_fit(histogram: Mapping[int, float], d_max: int | None = None) -> float:
    """Decay magnitude of the stack-distance distribution on log-log axes.

    Fits log10(density) against log10(distance) over power-of-two bins in
    ``[1, d_max]`` and returns the negated slope.
    """
    return slope_fit_with_error(histogram, d_max)[0]


def slope_fit_with_error(histogram: Mapping[int, float], d_max: int | None = None):
    mids, dens = log2_bins(histogram, d_max)
    if len(mids) < 3:
        raise InsufficientBins(f"need >= 3 nonzero distance bins, got {len(mids)}")
    slope, stderr = _line_fit(np.log10(mids), np.log10(dens))
    return -slope, stderr


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov distance between empirical CDFs."""
    a = np.sort(np.asarray(a))
    b = np.sort(np.asarray(b))
    if len(a) == 0 or len(b) == 0:
        return 0.0 if len(a) == len(b) else 1.0
    grid = np.union1d(a, b)
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


def scramble_references(keys: Sequence[Hashable], seed: int) -> list[Hashable]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(keys))
    return [keys[i] for i in perm]


@dataclass
class LocalityReport:
    alpha: float
    alpha_stderr: float
    distance_histogram: dict[int, float]
    distance_histogram_scrambled: dict[int, float]
    slope_original: float
    slope_original_stderr: float
    slope_scrambled: float
    slope_scrambled_stderr: float
    ks_statistic: float
    n_references: int
    n_distinct: int
    rank_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "alpha_stderr": self.alpha_stderr,
            "slope_original": self.slope_original,
            "slope_original_stderr": self.slope_original_stderr,
            "slope_scrambled": self.slope_scrambled,
            "slope_scrambled_stderr": self.slope_scrambled_stderr,
            "ks_statistic": self.ks_statistic,
            "n_references": self.n_references,
            "n_distinct": self.n_distinct,
            "distance_histogram": {str(k): v for k, v in sorted(self.distance_histogram.items())},
            "distance_histogram_scrambled": {
                str(k): v for k, v in sorted(self.distance_histogram_scrambled.items())
            },
        }


def _safe_slope(hist):
    try:
        return slope_fit_with_error(hist)
    except InsufficientBins:
        return float("nan"), float("nan")


def _safe_alpha(table, min_count):
    try:
        return zipf_fit(table, min_count)
    except InsufficientRanks:
        return float("nan"), float("nan")


def scramble_compare(
    keys: Sequence[Hashable], seed: int = 0, min_count: int = DEFAULT_MIN_COUNT
) -> LocalityReport:
    """Compare the stack-distance distribution of ``keys`` with a permuted copy.

    Slopes or alpha that cannot be fitted (too few bins or ranks) are NaN.
    """
    keys = list(keys)
    table = rank_frequency(keys)
    alpha, alpha_se = _safe_alpha(table, min_count)
    orig = stack_distances(keys)
    scr = stack_distances(scramble_references(keys, seed))
    h_orig, h_scr = orig.histogram(), scr.histogram()
    s_orig, se_orig = _safe_slope(h_orig)
    s_scr, se_scr = _safe_slope(h_scr)
    return LocalityReport(
        alpha=alpha,
        alpha_stderr=alpha_se,
        distance_histogram=h_orig,
        distance_histogram_scrambled=h_scr,
        slope_original=s_orig,
        slope_original_stderr=se_orig,
        slope_scrambled=s_scr,
        slope_scrambled_stderr=se_scr,
        ks_statistic=ks_statistic(orig.finite, scr.finite),
        n_references=len(keys),
        n_distinct=len(table),
        rank_counts=table.counts.tolist(),
    )
