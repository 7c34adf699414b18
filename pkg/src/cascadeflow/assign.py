"""Exact linear assignment for minibatch optimal-transport coupling.

solve() uses scipy's Jonker-Volgenant implementation for the heavy lifting.
When the cost matrix contains ties (duplicate entries), the optimal solution
may not be unique; in that case the result is canonicalized to the
lexicographically smallest optimal permutation so behavior is deterministic
and matches the brute-force oracle.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

BRUTE_FORCE_MAX_N = 8


class AssignmentError(ValueError):
    pass


def _validate(costs: np.ndarray) -> np.ndarray:
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise AssignmentError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise AssignmentError("cost matrix entries must be finite")
    return c


def _optimal_cost(c: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum())


def _lexicographic_refine(c: np.ndarray) -> np.ndarray:
    """Greedily pick, row by row, the smallest column that still permits an
    optimal completion.  Exact but O(n) LAP solves per row; only used when
    ties make the optimum non-unique."""
    n = c.shape[0]
    total = _optimal_cost(c)
    free = list(range(n))
    perm = np.empty(n, dtype=int)
    prefix_cost = 0.0
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        for j in sorted(free):
            remaining = [k for k in free if k != j]
            if len(rest_rows) == 0:
                completion = 0.0
            else:
                completion = _optimal_cost(c[np.ix_(rest_rows, remaining)])
            cand = prefix_cost + c[i, j] + completion
            if cand <= total + 1e-12 * max(1.0, abs(total)):
                perm[i] = j
                prefix_cost += c[i, j]
                free.remove(j)
                break
        else:
            raise AssignmentError("lexicographic refinement failed")  # unreachable
    return perm


def solve(costs: np.ndarray) -> np.ndarray:
    """Permutation sigma minimizing sum_i costs[i, sigma(i)].

    Ties are broken by the lowest-index lexicographic rule.
    """
    c = _validate(costs)
    rows, cols = linear_sum_assignment(c)
    perm = np.empty(c.shape[0], dtype=int)
    perm[rows] = cols
    # continuous random costs essentially never tie; only canonicalize when
    # duplicate entries make non-uniqueness possible
    if len(np.unique(c)) < c.size:
        perm = _lexicographic_refine(c)
    return perm


def brute_force(costs: np.ndarray) -> np.ndarray:
    """Exhaustive oracle with the same lexicographic tie-breaking as solve()."""
    c = _validate(costs)
    n = c.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise AssignmentError(f"brute_force refuses n={n} > {BRUTE_FORCE_MAX_N}")
    best_cost = math.inf
    best = None
    # itertools.permutations yields in lexicographic order, so the first
    # strict improvement rule keeps the lexicographically smallest optimum
    for perm in itertools.permutations(range(n)):
        cost = sum(c[i, perm[i]] for i in range(n))
        if cost < best_cost - 1e-12 * max(1.0, abs(cost)):
            best_cost = cost
            best = perm
    return np.array(best, dtype=int)
