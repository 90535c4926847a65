"""Maximum-weight bipartite matching for plan scoring.

The solver works on exact integers: every float weight is a dyadic rational,
so scaling by a common power of two is lossless. A mixed-radix bonus below the
weight resolution breaks ties toward the lexicographically smallest list of
``(row, col)`` pairs, which makes the returned matching unique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

Matrix = Sequence[Sequence[float]]


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[int, int, float], ...] = ()
    total_weight: float = 0.0

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[int, int, float]]) -> "Matching":
        ordered = tuple(sorted((int(i), int(j), float(w)) for i, j, w in pairs))
        return cls(ordered, pair_sum(w for _, _, w in ordered))

    def as_dict(self) -> dict[int, int]:
        return {i: j for i, j, _ in self.pairs}


def pair_sum(weights) -> float:
    # Correctly rounded, so matchings with equal exact weight report identical totals.
    return math.fsum(weights)


def _check(weights: Matrix) -> tuple[int, int]:
    m = len(weights)
    n = len(weights[0]) if m else 0
    for row in weights:
        if len(row) != n:
            raise ValueError("weight matrix rows have unequal length")
        for w in row:
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"weights must be finite and non-negative, got {w!r}")
    return m, n


def _to_integers(weights: Matrix) -> list[list[int]]:
    ratios = [[float(w).as_integer_ratio() for w in row] for row in weights]
    shift = max((den.bit_length() - 1 for row in ratios for _, den in row), default=0)
    return [[num << (shift - (den.bit_length() - 1)) for num, den in row] for row in ratios]


def solve_assignment(cost: Sequence[Sequence[int]]) -> list[int]:
    """Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres).

    Shortest-augmenting-path form with row/column potentials, O(n^3).
    Returns ``col_of_row``.
    """
    n = len(cost)
    inf = math.inf
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    row_of = [0] * (n + 1)  # row_of[j]: 1-based row assigned to column j, 0 = free
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = inf
            j1 = 0
            crow = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = crow[j - 1] - ui0 - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = [0] * n
    for j in range(1, n + 1):
        col_of[row_of[j] - 1] = j - 1
    return col_of


def max_weight_matching(weights: Matrix) -> Matching:
    """Maximum-weight injective matching of an M x N non-negative matrix.

    The smaller side is padded with zero-weight dummies and solved as a square
    assignment. Zero-weight pairs are dropped from the result.
    """
    m, n = _check(weights)
    if m == 0 or n == 0:
        return Matching()
    exact = _to_integers(weights)
    radix = n + 1
    scale = radix**m
    size = max(m, n)
    cost = [[0] * size for _ in range(size)]
    for i in range(m):
        place = radix ** (m - 1 - i)
        for j in range(n):
            if exact[i][j]:
                cost[i][j] = -(exact[i][j] * scale + (n - j) * place)
    col_of = solve_assignment(cost)
    return Matching.from_pairs(
        (i, col_of[i], weights[i][col_of[i]])
        for i in range(m)
        if col_of[i] < n and exact[i][col_of[i]]
    )


def ordered_matching(weights: Matrix) -> Matching:
    """Maximum-weight non-crossing matching (pairs increase in both indices).

    Order-preserving variant; not used by the default reward.
    """
    m, n = _check(weights)
    if m == 0 or n == 0:
        return Matching()
    exact = _to_integers(weights)
    best = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            best[i][j] = max(best[i - 1][j], best[i][j - 1], best[i - 1][j - 1] + exact[i - 1][j - 1])
    pairs = []
    i, j = m, n
    while i and j:
        if best[i][j] == best[i - 1][j]:
            i -= 1
        elif best[i][j] == best[i][j - 1]:
            j -= 1
        else:
            if exact[i - 1][j - 1]:
                pairs.append((i - 1, j - 1, weights[i - 1][j - 1]))
            i -= 1
            j -= 1
    return Matching.from_pairs(pairs)
