"""Bipartite matching of teacher and student instance sets.

The cost of pairing two instances is the Euclidean distance between their
pixel centroids; the assignment minimising total cost is found with the
Munkres (Hungarian) algorithm and then filtered by a radius threshold
expressed as a multiple of the pair's mean equivalent radius sqrt(area/pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster


@dataclass(frozen=True)
class MatchResult:
    """Matched (teacher_id, student_id, distance) triples plus the ids that
    stayed unmatched on each side. Instance ids are 1-based label values."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_teacher: list[int] = field(default_factory=list)
    unmatched_student: list[int] = field(default_factory=list)


def distance_matrix(teacher: np.ndarray, student: np.ndarray) -> np.ndarray:
    """(n, m) centroid-distance matrix between the instances of two label maps."""
    ct = raster.centroids(teacher)
    cs = raster.centroids(student)
    if ct.shape[0] == 0 or cs.shape[0] == 0:
        return np.zeros((ct.shape[0], cs.shape[0]))
    diff = ct[:, None, :] - cs[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def _solve_square(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hungarian algorithm with potentials on a square matrix.

    Returns (col_to_row, u, v): ``col_to_row[j]`` is the row assigned to
    column j (both 1-based; index 0 is the virtual start column).
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = int(p[j0])
            free = ~used[1:]
            cand = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cand < minv[1:])
            if upd.any():
                minv[1:][upd] = cand[upd]
                way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            sel = np.flatnonzero(used)
            u[p[sel]] += delta
            v[sel] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    return p, u, v


def _pairs_cost(cost: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    return float(sum(cost[r, c] for r, c in sorted(pairs)))


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    p, _, _ = _solve_square(cost)
    return _pairs_cost(cost, [(int(p[j]) - 1, j - 1) for j in range(1, cost.shape[0] + 1)])


def _lex_refine(padded: np.ndarray, n_real_rows: int, total: float) -> list[tuple[int, int]]:
    """Lexicographically smallest optimal assignment for the real rows,
    found by fixing each row in turn to the smallest column that preserves
    the optimal total cost."""
    k = padded.shape[0]
    tol = 1e-12 * max(1.0, abs(total)) + 1e-12
    rows_left = list(range(k))
    cols_left = list(range(k))
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    for i in range(n_real_rows):
        rows_rem = [r for r in rows_left if r != i]
        for j in cols_left:
            cols_rem = [c for c in cols_left if c != j]
            cand = fixed_cost + float(padded[i, j]) + _optimal_cost(padded[np.ix_(rows_rem, cols_rem)])
            if cand <= total + tol:
                fixed.append((i, j))
                fixed_cost += float(padded[i, j])
                rows_left = rows_rem
                cols_left = cols_rem
                break
        else:  # pragma: no cover - a perfect matching always completes
            raise RuntimeError("lexicographic refinement failed to fix a row")
    return fixed


def munkres(w: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size min(n, m), as (row, col) pairs sorted
    by row.

    Rectangular inputs are padded to square with a sentinel cost strictly
    larger than any real entry; sentinel pairs are stripped from the output.
    Ties between equal-cost assignments break toward the lexicographically
    smallest (row, col) sequence.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = w.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(w)) or w.min() < 0.0:
        raise ValueError("cost matrix entries must be finite and non-negative")
    k = max(n, m)
    sentinel = 1.0 + 2.0 * float(w.max())
    padded = np.full((k, k), sentinel)
    padded[:n, :m] = w
    p, u, v = _solve_square(padded)
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, k + 1)]
    total = _pairs_cost(padded, pairs)
    # The optimum is unique iff the zero-reduced-cost edges form exactly one
    # perfect matching; k such edges certify uniqueness and skip refinement.
    reduced = padded - u[1:, None] - v[None, 1:]
    near_zero = int((np.abs(reduced) <= 1e-9 * max(1.0, float(np.abs(padded).max()))).sum())
    if near_zero > k:
        pairs = _lex_refine(padded, n, total)
    return sorted((r, c) for r, c in pairs if r < n and c < m)


def equivalent_radius(area: float) -> float:
    return math.sqrt(area / math.pi)


def match_instances(teacher: np.ndarray, student: np.ndarray, r_factor: float = 1.5) -> MatchResult:
    """Munkres-match two instance maps, keeping a pair only when its centroid
    distance is at most ``r_factor`` times the mean equivalent radius of the
    two instances."""
    if r_factor <= 0.0:
        raise ValueError("r_factor must be positive")
    w = distance_matrix(teacher, student)
    assignment = munkres(w)
    areas_t = raster.instance_areas(teacher)
    areas_s = raster.instance_areas(student)
    pairs: list[tuple[int, int, float]] = []
    matched_t: set[int] = set()
    matched_s: set[int] = set()
    for r, c in assignment:
        rho = 0.5 * (equivalent_radius(float(areas_t[r])) + equivalent_radius(float(areas_s[c])))
        if w[r, c] <= r_factor * rho:
            pairs.append((r + 1, c + 1, float(w[r, c])))
            matched_t.add(r + 1)
            matched_s.add(c + 1)
    unmatched_t = [i for i in range(1, w.shape[0] + 1) if i not in matched_t]
    unmatched_s = [j for j in range(1, w.shape[1] + 1) if j not in matched_s]
    return MatchResult(pairs=pairs, unmatched_teacher=unmatched_t, unmatched_student=unmatched_s)
