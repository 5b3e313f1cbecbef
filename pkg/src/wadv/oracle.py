"""Ground-truth solvers for tiny transport instances.

Everything here is brute force on purpose: these routines anchor the tests
of the fast projection code, so they must be simple enough to trust and are
cross-validated against each other by construction. Two independent routes
exist for each quantity: the exact projection is a convex program (Clarabel)
checked against a dense grid search for n <= 3, and the exact transport
distance is a linear program (HiGHS) checked against enumeration of the
transport polytope's vertices for n <= 4.

Instances beyond 16 pixels are refused.
"""

from dataclasses import dataclass
from itertools import combinations

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog

from .errors import InstanceTooLarge

_MAX_PIXELS = 16


@dataclass
class TinyInstance:
    """A projection instance small enough for exact solutions.

    x, w    : reference and target, length n <= 16
    cost    : dense (n, n) ground cost, finite entries
    epsilon : transport budget
    r       : per-coordinate mass cap on the projected point
    """

    x: np.ndarray
    w: np.ndarray
    cost: np.ndarray
    epsilon: float
    r: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        n = self.x.size
        if n > _MAX_PIXELS:
            raise InstanceTooLarge(f"{n} pixels exceeds the exact limit {_MAX_PIXELS}")
        if self.w.shape != (n,) or self.cost.shape != (n, n):
            raise ValueError("x, w, cost shapes are inconsistent")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.cost))):
            raise ValueError("w and cost must be finite")
        if abs(self.x.sum() - 1.0) > 1e-9:
            raise ValueError(f"x sums to {self.x.sum():.12g}, expected 1")
        if self.x.min() < -1e-15 or self.x.max() > self.r + 1e-12:
            raise ValueError("x entries must lie in [0, r]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def n(self):
        return self.x.size


def exact_project(instance):
    """Minimize ||w - z||^2 / 2 over points z reachable from x within budget.

    The feasible set is {z : some plan P >= 0 has row sums x, column sums z,
    total cost <= epsilon, and z <= r}; the program is solved jointly over
    (z, P) to high accuracy. Returns z.
    """
    n = instance.n
    z = cp.Variable(n)
    plan = cp.Variable((n, n), nonneg=True)
    constraints = [
        plan @ np.ones(n) == instance.x,
        plan.T @ np.ones(n) == z,
        cp.sum(cp.multiply(plan, instance.cost)) <= instance.epsilon,
        z <= instance.r,
    ]
    objective = cp.Minimize(0.5 * cp.sum_squares(instance.w - z))
    prob = cp.Problem(objective, constraints)
    prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"exact projection failed with status {prob.status}")
    out = np.asarray(z.value, dtype=np.float64)
    return np.clip(out, 0.0, instance.r)


def _is_line_cost(cost):
    n = cost.shape[0]
    i = np.arange(n)
    return np.allclose(cost, np.abs(i[:, None] - i[None, :]), atol=1e-12)


def _w1_line(cum_x, z_cum):
    """1-d transport distance from cumulative sums (unit step cost)."""
    return np.abs(cum_x - z_cum).sum(axis=0)


def grid_project(instance, resolution=1e-3):
    """Dense grid search over z for n <= 3 line geometries.

    Independent of the convex solver: feasibility of each grid point is
    decided from the closed-form 1-d transport distance, and the best
    feasible point wins. Accuracy is limited by the grid resolution.
    """
    n = instance.n
    if n > 3:
        raise InstanceTooLarge("grid search handles n <= 3 only")
    x, w, eps, r = instance.x, instance.w, instance.epsilon, instance.r
    if n == 1:
        return np.ones(1)
    if n == 2:
        c01 = instance.cost[0, 1]
        if instance.cost[1, 0] != c01 or instance.cost[0, 0] != 0 or c01 <= 0:
            raise ValueError("grid search requires a symmetric positive cost")
        z0 = np.arange(0.0, 1.0 + resolution / 2, resolution)
        z1 = 1.0 - z0
        feas = (
            (z0 <= r + 1e-12)
            & (z1 <= r + 1e-12)
            & (c01 * np.abs(x[0] - z0) <= eps + 1e-12)
        )
        if not np.any(feas):
            raise RuntimeError("no feasible grid point")
        obj = (w[0] - z0) ** 2 + (w[1] - z1) ** 2
        obj[~feas] = np.inf
        k = int(np.argmin(obj))
        return np.array([z0[k], z1[k]])
    if not _is_line_cost(instance.cost):
        raise ValueError("n=3 grid search requires the unit line cost")
    g = np.arange(0.0, 1.0 + resolution / 2, resolution)
    z0, z1 = np.meshgrid(g, g, indexing="ij")
    z0, z1 = z0.ravel(), z1.ravel()
    z2 = 1.0 - z0 - z1
    keep = z2 >= -1e-12
    z0, z1, z2 = z0[keep], z1[keep], np.maximum(z2[keep], 0.0)
    w1 = np.abs(x[0] - z0) + np.abs(x[0] + x[1] - z0 - z1)
    feas = (
        (np.maximum(np.maximum(z0, z1), z2) <= r + 1e-12)
        & (w1 <= eps + 1e-12)
    )
    if not np.any(feas):
        raise RuntimeError("no feasible grid point")
    obj = (w[0] - z0) ** 2 + (w[1] - z1) ** 2 + (w[2] - z2) ** 2
    obj[~feas] = np.inf
    k = int(np.argmin(obj))
    return np.array([z0[k], z1[k], z2[k]])


def exact_ot_distance(a, b, cost):
    """Minimum transport cost between distributions a and b, by LP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    n = a.size
    if n > _MAX_PIXELS:
        raise InstanceTooLarge(f"{n} pixels exceeds the exact limit {_MAX_PIXELS}")
    if b.shape != (n,) or cost.shape != (n, n):
        raise ValueError("a, b, cost shapes are inconsistent")
    if abs(a.sum() - 1.0) > 1e-9 or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    row = np.kron(np.eye(n), np.ones((1, n)))
    col = np.kron(np.ones((1, n)), np.eye(n))
    a_eq = np.vstack([row, col])[:-1]  # last row is redundant
    b_eq = np.concatenate([a, b])[:-1]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def ot_distance_enumerated(a, b, cost):
    """Transport distance by enumerating the polytope's basic solutions.

    Every vertex of the transport polytope is supported on a spanning tree
    of the complete bipartite graph over rows and columns; trying all trees
    (feasible for n <= 4) and keeping the cheapest nonnegative one gives the
    minimum, with no optimization code shared with exact_ot_distance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    if n > 4:
        raise InstanceTooLarge("enumeration handles n <= 4 only")
    edges = [(i, j) for i in range(n) for j in range(n)]
    m = 2 * n - 1
    best = np.inf
    incidence = np.zeros((2 * n, len(edges)))
    for e, (i, j) in enumerate(edges):
        incidence[i, e] = 1.0
        incidence[n + j, e] = 1.0
    rhs = np.concatenate([a, b])
    for subset in combinations(range(len(edges)), m):
        cols = incidence[:, subset]
        # spanning tree iff the (2n-1)-edge subgraph is connected
        if not _spans(subset, edges, n):
            continue
        flow, res, rank, _ = np.linalg.lstsq(cols, rhs, rcond=None)
        if rank < m:
            continue
        if np.abs(cols @ flow - rhs).max() > 1e-9:
            continue
        if flow.min() < -1e-9:
            continue
        val = sum(max(f, 0.0) * cost[edges[k]] for f, k in zip(flow, subset))
        best = min(best, val)
    if not np.isfinite(best):
        raise RuntimeError("no basic feasible solution found")
    return float(best)


def _spans(subset, edges, n):
    parent = list(range(2 * n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    joined = 0
    for k in subset:
        i, j = edges[k]
        ru, rv = find(i), find(n + j)
        if ru != rv:
            parent[ru] = rv
            joined += 1
    return joined == 2 * n - 1
