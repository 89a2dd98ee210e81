import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aflowcache.errors import EmptyInput, InsufficientBins, InsufficientRanks
from aflowcache.locality import (RankFrequencyTable, ks_statistic, log2_bins, rank_frequency,
                                 scramble_compare, scramble_references, slope_fit, stack_distances,
                                 zipf_fit)
from aflowcache.traceio import SyntheticConfig, synthetic_references


def naive_distances(keys):
    out = []
    for t, k in enumerate(keys):
        prev = max((i for i in range(t) if keys[i] == k), default=None)
        out.append(-1 if prev is None else len(set(keys[prev + 1:t]) - {k}))
    return out


def refs(**kw):
    return synthetic_references(SyntheticConfig(**kw)).tolist()


# rank-frequency

def test_rank_frequency_example():
    t = rank_frequency("AAB")
    assert t.rows == ((1, "A", 2), (2, "B", 1))
    assert t.total == 3


def test_rank_frequency_all_distinct():
    assert set(rank_frequency(range(20)).counts.tolist()) == {1}


def test_rank_frequency_ties_are_deterministic():
    a = rank_frequency(["b", "a", "c"])
    b = rank_frequency(["c", "a", "b"])
    assert a.rows == b.rows


def test_rank_frequency_empty():
    with pytest.raises(EmptyInput):
        rank_frequency([])


def test_generator_top_two_ratio():
    t = rank_frequency(refs(n_flows=1000, alpha=1.0, n_connections=100_000, seed=2))
    c = t.counts
    assert c[0] / c[1] == pytest.approx(2.0, rel=0.1)


# zipf fit

def test_zipf_exact_power_law():
    counts = [round(1e6 * n ** -1.0) for n in range(1, 1001)]
    alpha, _ = zipf_fit(RankFrequencyTable.from_counts(counts))
    assert alpha == pytest.approx(1.0, abs=0.01)


def test_zipf_flat():
    alpha, stderr = zipf_fit(RankFrequencyTable.from_counts([40] * 100))
    assert alpha == pytest.approx(0.0, abs=0.01)
    assert stderr == pytest.approx(0.0, abs=1e-9)


def test_zipf_needs_three_ranks():
    with pytest.raises(InsufficientRanks):
        zipf_fit(RankFrequencyTable.from_counts([50, 20]))
    with pytest.raises(InsufficientRanks):
        zipf_fit(RankFrequencyTable.from_counts([50, 20, 4, 3]))


def test_zipf_recovers_generator_alpha():
    keys = refs(n_flows=10_000, alpha=0.9, n_connections=100_000, seed=4)
    alpha, stderr = zipf_fit(rank_frequency(keys))
    assert alpha == pytest.approx(0.9, abs=0.05)
    assert stderr > 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=30, max_size=300), st.integers(0, 2**32 - 1))
def test_zipf_permutation_invariant(keys, seed):
    a = rank_frequency(keys)
    b = rank_frequency(scramble_references(keys, seed))
    assert a == b
    try:
        fit = zipf_fit(a, min_count=1)
    except InsufficientRanks:
        return
    assert zipf_fit(b, min_count=1) == fit


# stack distances

@pytest.mark.parametrize("keys,expected", [
    ("AA", [-1, 0]),
    ("ABA", [-1, -1, 1]),
    ("ABBCA", [-1, -1, 0, -1, 2]),
])
def test_stack_distance_examples(keys, expected):
    assert stack_distances(list(keys)).distances.tolist() == expected


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 12), max_size=120))
def test_stack_distance_matches_naive(keys):
    assert stack_distances(keys).distances.tolist() == naive_distances(keys)


def test_all_distinct_has_no_finite_distances():
    sd = stack_distances(range(50))
    assert sd.histogram() == {}
    assert sd.infinite == 50
    assert len(sd.finite) == 0


def test_histogram_mass():
    hist = stack_distances(refs(n_flows=500, n_connections=20_000, seed=1)).histogram()
    assert math.fsum(hist.values()) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("alpha", [0.9, 1.0])
def test_median_distance_falls_with_correlation(alpha):
    # Reuse draws uniformly from the last 256 distinct flows (median ~128), so
    # this only holds when the uncorrelated median sits above that.
    for seed in range(3):
        medians = [np.median(stack_distances(
            refs(n_flows=10_000, alpha=alpha, n_connections=100_000, correlation_p=p, seed=seed)).finite)
            for p in (0.0, 0.4, 0.8)]
        assert medians[0] > medians[1] > medians[2], medians


# slope fit

def test_slope_exact_power_law():
    hist = {d: d ** -1.0 for d in range(1, 4097)}
    total = sum(hist.values())
    assert slope_fit({d: p / total for d, p in hist.items()}) == pytest.approx(1.0, abs=0.01)


def test_slope_flat():
    assert slope_fit({d: 0.01 for d in range(1, 101)}) == pytest.approx(0.0, abs=0.02)


def test_slope_needs_three_bins():
    with pytest.raises(InsufficientBins):
        slope_fit({1: 0.5, 2: 0.5})
    with pytest.raises(InsufficientBins):
        slope_fit({0: 1.0})


def test_log2_bins_density():
    mids, dens = log2_bins({1: 0.5, 2: 0.25, 3: 0.25})
    assert mids.tolist() == [1.0, 2.5]
    assert dens.tolist() == [0.5, 0.25]


def test_uncorrelated_slopes_agree():
    rep = scramble_compare(refs(n_flows=10_000, alpha=1.0, n_connections=100_000, seed=3), seed=9)
    assert rep.slope_original - rep.slope_scrambled == pytest.approx(0.0, abs=0.1)


# scramble

def test_ks_statistic_basics():
    a = np.array([1, 2, 3])
    assert ks_statistic(a, a) == 0.0
    assert ks_statistic(np.array([0, 0]), np.array([5, 5])) == 1.0
    assert ks_statistic(np.array([]), np.array([])) == 0.0


def test_scramble_preserves_multiset():
    keys = refs(n_flows=200, n_connections=5000, correlation_p=0.5, seed=8)
    assert sorted(scramble_references(keys, 1)) == sorted(keys)
    assert scramble_references(keys, 1) == scramble_references(keys, 1)


def test_scramble_compare_report():
    keys = refs(n_flows=5000, alpha=1.0, n_connections=50_000, correlation_p=0.8, seed=6)
    rep = scramble_compare(keys, seed=1)
    assert rep.ks_statistic >= 0.05
    joint = math.hypot(rep.slope_original_stderr, rep.slope_scrambled_stderr)
    assert abs(rep.slope_original - rep.slope_scrambled) > joint
    assert rep.n_references == len(keys)
    assert rep.alpha >= 0
    d = rep.to_dict()
    assert d["n_distinct"] == rep.n_distinct and "distance_histogram" in d


def test_scramble_compare_unfittable_is_nan():
    rep = scramble_compare(["a", "b", "a"])
    assert math.isnan(rep.alpha) and math.isnan(rep.slope_original)
