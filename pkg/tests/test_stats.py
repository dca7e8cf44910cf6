import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bislot.harness import stats


def exhaustive_p(d):
    """Two-sided exact p by enumerating every sign pattern of the ranked |d|."""
    d = np.asarray([v for v in d if v != 0], dtype=float)
    n = len(d)
    if n == 0:
        return 1.0
    ranks = stats._midranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    w_minus = ranks[d < 0].sum()
    w = min(w_plus, w_minus)
    hits = 0
    for signs in itertools.product([0, 1], repeat=n):
        if sum(r for r, s in zip(ranks, signs) if s) <= w + 1e-9:
            hits += 1
    return min(1.0, 2 * hits / 2 ** n)


def test_all_wins_n10():
    res = stats.wilcoxon_signed_rank(np.arange(1, 11) * 0.01 + 0.1, np.zeros(10))
    assert res.w == 0 and res.n == 10
    assert res.p_value == 2 / 1024
    assert round(res.p_value, 3) == 0.002


def test_identical_variants_degenerate():
    res = stats.wilcoxon_signed_rank([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
    assert res.p_value == 1.0 and res.n == 0


def test_three_seed_toy_against_enumeration():
    # diffs 0.3, -0.1, 0.2 -> ranks 3, 1, 2; W+ = 5, W- = 1; P(W+ <= 1) = 2/8
    res = stats.wilcoxon_signed_rank([0.3, -0.1, 0.2])
    assert (res.w_plus, res.w_minus, res.w) == (5.0, 1.0, 1.0)
    assert res.p_value == 0.5
    assert res.p_value == exhaustive_p([0.3, -0.1, 0.2])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10))
def test_matches_exhaustive_enumeration_with_ties(diffs):
    d = [v * 0.1 for v in diffs]
    assert stats.wilcoxon_signed_rank(d).p_value == pytest.approx(exhaustive_p(d), abs=1e-12)


def test_null_distribution_counts():
    counts = stats.signed_rank_null([1, 2, 3])
    # doubled W+: subsets of {1,2,3} sums 0,1,2,3,3,4,5,6
    assert counts == {0: 1, 2: 1, 4: 1, 6: 2, 8: 1, 10: 1, 12: 1}


def test_summaries():
    m, s = stats.mean_std([1.0, 2.0, 3.0])
    assert (m, s) == (2.0, 1.0)
    lo, hi = stats.normal_ci([1.0, 2.0, 3.0])
    assert lo < 2.0 < hi
    blo, bhi = stats.bootstrap_ci([1.0, 2.0, 3.0, 4.0], seed=0)
    assert 1.0 <= blo <= 2.5 <= bhi <= 4.0
    assert stats.bootstrap_ci([1.0, 2.0, 3.0, 4.0], seed=0) == (blo, bhi)
    assert stats.mean_std([5.0]) == (5.0, 0.0)
