"""Minimum-cost perfect assignment (shortest augmenting path Hungarian method)."""

from __future__ import annotations

import numpy as np


class AssignmentError(ValueError):
    pass


def _hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (row->col assignment, row potentials, col potentials).

    Potentials satisfy cost[i, j] - u[i] - v[j] >= 0 with equality on the
    assignment. O(n^3), inner loop vectorized over columns.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _lexicographic_min(assign: np.ndarray, tight: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    Rows are fixed in order to their smallest admissible column; a column is
    admissible when the displaced rows can be re-routed along an alternating
    path through unlocked rows.
    """
    n = len(assign)
    row_of = np.empty(n, dtype=np.int64)
    row_of[assign] = np.arange(n)
    assign = assign.copy()
    locked_col = np.zeros(n, dtype=bool)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]
    for i in range(n):
        for j in adj[i]:
            if locked_col[j]:
                continue
            if assign[i] == j:
                break
            target = assign[i]
            path = _reroute(row_of[j], j, target, adj, assign, locked_col, row_of, i)
            if path is None:
                continue
            # path: [(row, new_col), ...] ending at target
            for r, c in path:
                assign[r] = c
                row_of[c] = r
            assign[i] = j
            row_of[j] = i
            break
        locked_col[assign[i]] = True
    return assign


def _reroute(start_row, banned_col, target, adj, assign, locked_col, row_of, pinned_row):
    """BFS for an alternating path moving ``start_row`` off ``banned_col`` that ends at ``target``."""
    parent = {start_row: None}
    via = {}
    queue = [start_row]
    while queue:
        r = queue.pop(0)
        for c in adj[r]:
            if locked_col[c] or c == banned_col or c == assign[r]:
                continue
            if c == target:
                path = [(r, c)]
                while parent[r] is not None:
                    prev = parent[r]
                    path.append((prev, via[r]))
                    r = prev
                return path
            nxt = row_of[c]
            if nxt == pinned_row or nxt in parent:
                continue
            parent[nxt] = r
            via[nxt] = c
            queue.append(nxt)
    return None


def solve_assignment(cost, tol: float | None = None) -> tuple[np.ndarray, float]:
    """Permutation ``perm`` minimizing ``sum(cost[i, perm[i]])`` and that total.

    Among optimal permutations (within ``tol``), the lexicographically smallest
    is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise AssignmentError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise AssignmentError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    assign, u, v = _hungarian(c)
    best = float(c[np.arange(n), assign].sum())
    if tol is None:
        tol = 1e-9 * max(1.0, float(np.abs(c).max())) * n
    tight = (c - u[:, None] - v[None, :]) <= tol
    lex = _lexicographic_min(assign, tight)
    lex_cost = float(c[np.arange(n), lex].sum())
    if lex_cost <= best + tol:
        return lex, lex_cost
    return assign, best
