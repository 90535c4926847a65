"""Brute-force reference implementations used to cross-check the fast paths."""

from __future__ import annotations

import itertools
from fractions import Fraction
from typing import Sequence

from .matching import Matching, pair_sum

Matrix = Sequence[Sequence[float]]


def _candidate_matchings(weights: Matrix):
    """Yield every injective matching as a sorted tuple of positive-weight pairs.

    Enumerates permutations of the zero-padded square matrix; since weights are
    non-negative this covers every partial matching up to zero-weight pairs.
    """
    m = len(weights)
    n = len(weights[0]) if m else 0
    size = max(m, n)
    for perm in itertools.permutations(range(size)):
        yield tuple(
            (i, perm[i], weights[i][perm[i]])
            for i in range(m)
            if perm[i] < n and weights[i][perm[i]] > 0
        )


def brute_force_total(weights: Matrix) -> float:
    """Largest matching weight over all injective matchings."""
    if not weights or not weights[0]:
        return 0.0
    return max(pair_sum(w for _, _, w in pairs) for pairs in _candidate_matchings(weights))


def brute_force_matching(weights: Matrix) -> Matching:
    """Exact maximum with the lexicographically smallest pair list among ties."""
    if not weights or not weights[0]:
        return Matching()
    best_value = None
    best_pairs = None
    for pairs in _candidate_matchings(weights):
        value = sum((Fraction(w) for _, _, w in pairs), Fraction(0))
        key = tuple((i, j) for i, j, _ in pairs)
        if best_value is None or value > best_value or (value == best_value and key < best_key):
            best_value, best_pairs, best_key = value, pairs, key
    return Matching.from_pairs(best_pairs)


def brute_force_ordered_total(weights: Matrix) -> float:
    """Best non-crossing matching by exhaustive search over increasing pair chains."""
    m = len(weights)
    n = len(weights[0]) if m else 0
    best = 0.0
    for k in range(1, min(m, n) + 1):
        for rows in itertools.combinations(range(m), k):
            for cols in itertools.combinations(range(n), k):
                best = max(best, pair_sum(weights[i][j] for i, j in zip(rows, cols)))
    return best
