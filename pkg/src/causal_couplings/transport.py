"""Exact discrete optimal transport by the transportation simplex method.

Northwest-corner start, duals from the basis tree, entering/leaving variables
by Bland's smallest-index rule so degenerate pivots cannot cycle.  The basis
always holds ``m + n - 1`` cells (zero-valued cells are kept as basic), so the
basis graph over row and column nodes is a spanning tree.
"""
from collections import deque

import numpy as np


class TransportError(ValueError):
    pass


def northwest_corner(supply, demand):
    """Initial basic feasible plan; returns ``(plan, basis)`` with ``m+n-1`` basic cells."""
    a = np.array(supply, dtype=float)
    b = np.array(demand, dtype=float)
    m, n = len(a), len(b)
    plan = np.zeros((m, n))
    basis = []
    i = j = 0
    while i < m and j < n:
        t = min(a[i], b[j])
        plan[i, j] = t
        basis.append((i, j))
        a[i] -= t
        b[j] -= t
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return plan, basis


def _duals(cost, basis, m, n):
    """Solve ``u_i + v_j = c_ij`` over basic cells with ``u_0 = 0``."""
    rows = [[] for _ in range(m)]
    cols = [[] for _ in range(n)]
    for i, j in basis:
        rows[i].append(j)
        cols[j].append(i)
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([("r", 0)])
    while queue:
        kind, k = queue.popleft()
        if kind == "r":
            for j in rows[k]:
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in cols[k]:
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _tree_path(basis, m, n, start_row, end_col):
    """Alternating cell path in the basis tree from row node to column node."""
    adj = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append(("c", j))
        adj.setdefault(("c", j), []).append(("r", i))
    src, dst = ("r", start_row), ("c", end_col)
    prev = {src: None}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        if node == dst:
            break
        for nxt in adj.get(node, ()):
            if nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    nodes = []
    node = dst
    while node is not None:
        nodes.append(node)
        node = prev[node]
    nodes.reverse()
    cells = []
    for a, b in zip(nodes[:-1], nodes[1:]):
        cells.append((a[1], b[1]) if a[0] == "r" else (b[1], a[1]))
    return cells


def transport_simplex(supply, demand, cost, tol=1e-12, max_iter=100000):
    """Minimize ``sum(plan * cost)`` over plans with the given row/column sums.

    Returns ``(plan, objective)``.  ``supply`` and ``demand`` must have equal
    totals up to ``1e-9`` (demand is rescaled to match exactly).
    """
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    cost = np.asarray(cost, dtype=float)
    m, n = len(supply), len(demand)
    if cost.shape != (m, n):
        raise TransportError(f"cost has shape {cost.shape}, expected {(m, n)}")
    if not np.all(np.isfinite(cost)):
        raise TransportError("cost entries must be finite")
    if np.any(supply < 0) or np.any(demand < 0):
        raise TransportError("supplies and demands must be nonnegative")
    if abs(supply.sum() - demand.sum()) > 1e-9:
        raise TransportError("unbalanced problem: totals differ")
    demand = demand * (supply.sum() / demand.sum())

    plan, basis = northwest_corner(supply, demand)
    scale = max(1.0, float(np.abs(cost).max()))
    for _ in range(max_iter):
        u, v = _duals(cost, basis, m, n)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), dtype=bool)
        for cell in basis:
            in_basis[cell] = True
        candidates = np.argwhere((reduced < -tol * scale) & ~in_basis)
        if len(candidates) == 0:
            return plan, float(np.sum(plan * cost))
        ei, ej = map(int, candidates[0])  # Bland: smallest (row, col) index

        path = _tree_path(basis, m, n, ei, ej)
        # cycle: entering cell (+), then path cells alternate -, +, -, ...
        minus = path[0::2]
        plus = path[1::2]
        theta = min(plan[c] for c in minus)
        leaving = min(c for c in minus if plan[c] == theta)
        for c in minus:
            plan[c] -= theta
        for c in plus:
            plan[c] += theta
        plan[ei, ej] += theta
        plan[leaving] = 0.0
        basis.remove(leaving)
        basis.append((ei, ej))
    raise TransportError("transportation simplex did not converge")
