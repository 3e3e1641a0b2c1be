"""Exact (unregularized) transport for oracle-sized instances.

Two independent routes: brute-force enumeration of the transportation
polytope's vertices for at most 3x3 problems, and a dense transportation
simplex (north-west corner start, potential-based pricing, cycle pivots) for
anything up to 64 cells. Neither shares code with the Sinkhorn solver.
"""

from collections import deque
from itertools import combinations

import numpy as np

from otat.numeric import ShapeError, as_matrix
from otat.transport.cost import CostMatrix
from otat.transport.sinkhorn import Marginals, TransportPlan

__all__ = ["ScaleError", "exact_ot", "enumerate_vertices", "transport_simplex", "MAX_CELLS"]

MAX_CELLS = 64
ENUMERATION_CELLS = 9


class ScaleError(ValueError):
    """Instance is too large for the exact oracle."""


def _validate(cost, marginals):
    c = as_matrix(cost.values if isinstance(cost, CostMatrix) else cost)
    if c.ndim != 2:
        raise ShapeError(f"exact_ot solves one problem at a time, got shape {c.shape}")
    n, m = c.shape
    if n * m > MAX_CELLS:
        raise ScaleError(f"{n}x{m} exceeds the {MAX_CELLS}-cell oracle limit")
    if marginals is None:
        marginals = Marginals.uniform(n, m)
    if marginals.a.shape != (n,) or marginals.b.shape != (m,):
        raise ShapeError("marginal lengths do not match the cost matrix")
    return c, marginals.a, marginals.b


def enumerate_vertices(c, a, b):
    """Minimum-cost vertex found by checking every (n+m-1)-cell support."""
    n, m = c.shape
    cells = [(i, j) for i in range(n) for j in range(m)]
    rhs = np.concatenate([a, b])
    best_plan, best_value = None, np.inf
    for support in combinations(range(len(cells)), n + m - 1):
        system = np.zeros((n + m, len(support)))
        for col, k in enumerate(support):
            i, j = cells[k]
            system[i, col] = 1.0
            system[n + j, col] = 1.0
        if np.linalg.matrix_rank(system) < n + m - 1:
            continue
        x, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        if np.max(np.abs(system @ x - rhs)) > 1e-10 or np.min(x) < -1e-12:
            continue
        plan = np.zeros((n, m))
        for col, k in enumerate(support):
            plan[cells[k]] = max(x[col], 0.0)
        value = float((plan * c).sum())
        if value < best_value - 1e-15:
            best_plan, best_value = plan, value
    return best_plan, best_value


def _northwest_corner(a, b):
    n, m = len(a), len(b)
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    x = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        amount = min(ra[i], rb[j])
        x[i, j] = max(amount, 0.0)
        ra[i] -= amount
        rb[j] -= amount
        basis.append((i, j))
        if i == n - 1 and j == m - 1:
            break
        if i == n - 1:
            j += 1
        elif j == m - 1 or ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return x, basis


def _potentials(c, basis, n, m):
    u = np.full(n, np.nan)
    v = np.full(m, np.nan)
    u[0] = 0.0
    by_row = [[] for _ in range(n)]
    by_col = [[] for _ in range(m)]
    for i, j in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    queue = deque([("r", 0)])
    while queue:
        side, k = queue.popleft()
        if side == "r":
            for j in by_row[k]:
                if np.isnan(v[j]):
                    v[j] = c[k, j] - u[k]
                    queue.append(("c", j))
        else:
            for i in by_col[k]:
                if np.isnan(u[i]):
                    u[i] = c[i, k] - v[k]
                    queue.append(("r", i))
    return u, v


def _tree_path(basis, n, m, start_row, end_col):
    """Cells on the unique basis-tree path from row ``start_row`` to column ``end_col``."""
    adjacency = {("r", i): [] for i in range(n)}
    adjacency.update({("c", j): [] for j in range(m)})
    for i, j in basis:
        adjacency[("r", i)].append(("c", j))
        adjacency[("c", j)].append(("r", i))
    start, goal = ("r", start_row), ("c", end_col)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in adjacency[node]:
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    nodes = [goal]
    while parent[nodes[-1]] is not None:
        nodes.append(parent[nodes[-1]])
    nodes.reverse()
    path = []
    for u, w in zip(nodes, nodes[1:]):
        row = u[1] if u[0] == "r" else w[1]
        col = w[1] if w[0] == "c" else u[1]
        path.append((row, col))
    return path


def transport_simplex(c, a, b, max_pivots=10_000):
    n, m = c.shape
    x, basis = _northwest_corner(a, b)
    for _ in range(max_pivots):
        u, v = _potentials(c, basis, n, m)
        reduced = c - u[:, None] - v[None, :]
        for i, j in basis:
            reduced[i, j] = 0.0
        k = int(np.argmin(reduced))
        if reduced.flat[k] >= -1e-12:
            return x, float((x * c).sum())
        entering = divmod(k, m)
        path = _tree_path(basis, n, m, entering[0], entering[1])
        # path cells alternate -, +, -, ... starting next to the entering cell
        minus = path[0::2]
        plus = path[1::2]
        leaving = min(minus, key=lambda cell: x[cell])
        theta = x[leaving]
        for cell in minus:
            x[cell] -= theta
        for cell in plus:
            x[cell] += theta
        x[entering] += theta
        x[leaving] = 0.0
        np.maximum(x, 0.0, out=x)
        basis.remove(leaving)
        basis.append(entering)
    raise RuntimeError(f"transportation simplex did not terminate in {max_pivots} pivots")


def exact_ot(cost, marginals=None):
    """Solve the unregularized transport LP exactly; returns ``(plan, value)``."""
    c, a, b = _validate(cost, marginals)
    if c.size <= ENUMERATION_CELLS:
        plan, value = enumerate_vertices(c, a, b)
    else:
        plan, value = transport_simplex(c, a, b)
    result = TransportPlan(plan=plan, iterations=0, converged=True, final_residual=0.0)
    return result, value
