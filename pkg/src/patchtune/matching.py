"""Exact one-to-one matching between two patch blocks and the cosine critic.

The solver is the O(R^3) Hungarian method with dual potentials. Among all
cost-minimal bijections the lexicographically smallest mapping is returned:
after solving, every optimal bijection is a perfect matching of the "tight"
edges (zero reduced cost), so the smallest one is built greedily, row by row,
keeping a column only if the remaining rows can still be matched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DomainError, ShapeError

_TIGHT_RTOL = 1e-10


@numba.njit(cache=True)
def _hungarian(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return u[1:], v[1:]


@numba.njit(cache=True)
def _completable(tight, first_row, col_taken):
    """True if rows ``first_row..n-1`` have a perfect matching on free columns."""
    n = tight.shape[0]
    match_col = np.full(n, -1, dtype=np.int64)
    match_row = np.full(n, -1, dtype=np.int64)
    for root in range(first_row, n):
        came_from = np.full(n, -1, dtype=np.int64)
        visited = np.zeros(n, dtype=np.bool_)
        queue = np.empty(n, dtype=np.int64)
        head = 0
        tail = 0
        queue[tail] = root
        tail += 1
        found = -1
        while head < tail and found < 0:
            x = queue[head]
            head += 1
            for y in range(n):
                if col_taken[y] or visited[y] or not tight[x, y]:
                    continue
                visited[y] = True
                came_from[y] = x
                if match_col[y] < 0:
                    found = y
                    break
                queue[tail] = match_col[y]
                tail += 1
        if found < 0:
            return False
        y = found
        while True:
            x = came_from[y]
            prev = match_row[x]
            match_col[y] = x
            match_row[x] = y
            if x == root:
                break
            y = prev
    return True


@numba.njit(cache=True)
def _assign_one(cost, rtol):
    n = cost.shape[0]
    u, v = _hungarian(cost)
    scale = 1.0
    for i in range(n):
        for j in range(n):
            a = abs(cost[i, j])
            if a > scale:
                scale = a
    tol = rtol * scale
    tight = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            tight[i, j] = cost[i, j] - u[i] - v[j] <= tol
    mapping = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    for r in range(n):
        for j in range(n):
            if taken[j] or not tight[r, j]:
                continue
            taken[j] = True
            if _completable(tight, r + 1, taken):
                mapping[r] = j
                break
            taken[j] = False
    return mapping


@numba.njit(cache=True)
def _assign_many(costs, rtol):
    m = costs.shape[0]
    n = costs.shape[1]
    out = np.empty((m, n), dtype=np.int64)
    for k in range(m):
        out[k] = _assign_one(costs[k], rtol)
    return out


@dataclass(frozen=True)
class Assignment:
    """Query slice ``r`` is matched to key slice ``mapping[r]``."""

    mapping: tuple[int, ...]
    total_cost: float


def euclidean_costs(query: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances ``cost[r, s] = ||query[r] - key[s]||``.

    Works on a single pair of ``(R, d)`` blocks or on stacks ``(..., R, d)``.
    """
    diff = query[..., :, None, :] - key[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _check_blocks(query: np.ndarray, key: np.ndarray) -> None:
    if query.ndim != 2 or key.ndim != 2 or query.shape != key.shape:
        raise ShapeError(f"optimal_assignment: blocks {query.shape} and {key.shape} differ")
    if not (np.isfinite(query).all() and np.isfinite(key).all()):
        raise DomainError("optimal_assignment: non-finite patch values")


def solve_cost_matrix(cost: np.ndarray) -> Assignment:
    """Minimum-cost bijection for a square cost matrix."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"cost matrix must be square, got {cost.shape}")
    mapping = _assign_one(cost, _TIGHT_RTOL)
    total = 0.0
    for r, s in enumerate(mapping):
        total += cost[r, s]
    return Assignment(tuple(int(s) for s in mapping), float(total))


def optimal_assignment(query, key) -> Assignment:
    """Match the slices of ``query`` to those of ``key`` at minimum Euclidean cost."""
    query = np.asarray(getattr(query, "data", query), dtype=np.float64)
    key = np.asarray(getattr(key, "data", key), dtype=np.float64)
    _check_blocks(query, key)
    return solve_cost_matrix(euclidean_costs(query, key))


def batch_assignments(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Optimal mappings of one ``(R, d)`` query against ``(M, R, d)`` keys.

    Returns an ``(M, R)`` integer array; row ``k`` equals
    ``optimal_assignment(query, keys[k]).mapping``.
    """
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 3 or keys.shape[1:] != query.shape:
        raise ShapeError(f"batch_assignments: query {query.shape} vs keys {keys.shape}")
    costs = np.ascontiguousarray(euclidean_costs(query[None], keys))
    return _assign_many(costs, _TIGHT_RTOL)


def critic(query, key, assignment: Assignment, tau: float) -> np.ndarray:
    """Per-slice critic ``exp(cos(query[r], key[mapping[r]]) / tau)``."""
    if tau <= 0:
        raise DomainError(f"critic: tau must be positive, got {tau}")
    query = np.asarray(getattr(query, "data", query), dtype=np.float64)
    key = np.asarray(getattr(key, "data", key), dtype=np.float64)
    if query.shape != key.shape or len(assignment.mapping) != query.shape[0]:
        raise ShapeError("critic: assignment does not fit the blocks")
    matched = key[list(assignment.mapping)]
    qn = np.linalg.norm(query, axis=1)
    kn = np.linalg.norm(matched, axis=1)
    if (qn < 1e-12).any() or (kn < 1e-12).any():
        raise DomainError("critic: zero-norm patch row")
    cos = (query * matched).sum(axis=1) / (qn * kn)
    return np.exp(cos / tau)
