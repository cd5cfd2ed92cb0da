"""Minimum-cost cluster-label matching.

`hungarian_solve` is a shortest-augmenting-path solver (O(K^3)) over square
float cost matrices.  Ties are broken deterministically: among all optimal
assignments the lexicographically smallest permutation is returned, found by
restricting to the tight (zero reduced cost, within a scale-relative
tolerance) edges of the optimal dual solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A cost matrix is a square, finite, float [K, K] array.
CostMatrix = np.ndarray


@dataclass
class AssignmentResult:
    perm: list          # perm[row] = assigned column
    total_cost: float


def _validate(costs) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1] or costs.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and non-empty, got shape {costs.shape}")
    if not np.isfinite(costs).all():
        raise ValueError("cost matrix contains non-finite entries")
    return costs


def _shortest_path_solve(costs: np.ndarray):
    """Augmenting-path assignment with dual potentials (1-indexed internals,
    column 0 is the sentinel).  Returns (perm, row duals, column duals)."""
    n = costs.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row assigned to column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = costs[i0 - 1] - u[i0] - v[1:]
            improve = free & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            way[1:][improve] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # lowest index on ties
            delta = cand[j1 - 1]
            used_cols = np.flatnonzero(used)
            u[match[used_cols]] += delta
            v[used_cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm, u[1:], v[1:]


def _lex_smallest_tight_matching(tight: np.ndarray, start: np.ndarray):
    """Lexicographically smallest perfect matching inside the tight-edge
    bipartite graph, seeded by a known perfect matching."""
    n = tight.shape[0]
    match_row = start.copy()
    match_col = np.empty(n, dtype=np.int64)
    match_col[match_row] = np.arange(n)

    def reaugment(row, banned_cols, fixed_rows):
        """DFS for an alternative column for `row`; mutates the matching."""
        for c in np.flatnonzero(tight[row]):
            if banned_cols[c]:
                continue
            banned_cols[c] = True
            owner = match_col[c]
            if owner == -1 or (owner not in fixed_rows and reaugment(owner, banned_cols, fixed_rows)):
                match_row[row] = c
                match_col[c] = row
                return True
        return False

    fixed_rows: set[int] = set()
    for r in range(n):
        current = match_row[r]
        for c in np.flatnonzero(tight[r]):
            if c >= current:
                break  # keeping the current column is always feasible
            if match_col[c] in fixed_rows:
                continue
            displaced = match_col[c]
            match_col[current] = -1
            match_row[r] = c
            match_col[c] = r
            banned = np.zeros(n, dtype=bool)
            banned[c] = True
            if reaugment(displaced, banned, fixed_rows | {r}):
                break
            # revert
            match_row[r] = current
            match_col[current] = r
            match_col[c] = displaced
        fixed_rows.add(r)
    return match_row


def hungarian_solve(m: CostMatrix) -> AssignmentResult:
    """Minimum-total-cost perfect matching of a square finite cost matrix.

    Among cost ties (equal within ~1e-9 of the matrix scale) the
    lexicographically smallest optimal permutation is returned.
    """
    costs = _validate(m)
    n = costs.shape[0]
    perm, u, v = _shortest_path_solve(costs)
    tol = 1e-9 * max(1.0, float(np.abs(costs).max()))
    tight = (costs - u[:, None] - v[None, :]) <= tol
    # Every optimal assignment lives on tight edges; ties show up as rows
    # with more than one tight edge.
    if np.any(tight.sum(axis=1) > 1):
        refined = _lex_smallest_tight_matching(tight, perm)
        rows = np.arange(n)
        if float(costs[rows, refined].sum()) <= float(costs[rows, perm].sum()):
            perm = refined
    total = float(costs[np.arange(n), perm].sum())
    return AssignmentResult(perm=[int(p) for p in perm], total_cost=total)


def build_cluster_cost(logits: np.ndarray, labels) -> CostMatrix:
    """costs[k, l] = total negative log-probability of explaining the points of
    ground-truth class l with predicted cluster k."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [K, N], got shape {logits.shape}")
    k, n = logits.shape
    if n < 1 or labels.shape != (n,):
        raise ValueError(f"need one label per point: logits {logits.shape}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    m = logits.max(axis=0, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=0, keepdims=True)))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -logp @ onehot
