"""Exact order-1 Wasserstein distances between empirical point clouds.

The solver is a transportation simplex: an initial basic feasible tree from
the row-minimum rule, then pivots chosen by block pricing on reduced costs,
with Bland's rule as an anti-cycling fallback after long degenerate runs.
"""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .numkit import SeededRng

log = logging.getLogger(__name__)

EXACT_ENTRY_LIMIT = 4_000_000
SUBSAMPLE_CAP = 2000
WEIGHT_TOL = 1e-9


@dataclass
class EmpiricalDistribution:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.points),):
            raise ValueError("one weight per point required")
        _check_weights(self.weights, "weights")

    @classmethod
    def uniform(cls, points):
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if n == 0:
            raise ValueError("empty point cloud")
        return cls(points, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    gamma: np.ndarray
    cost: float


def _check_weights(w, name):
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{name} must be finite and non-negative")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"{name} must sum to 1, got {w.sum()!r}")


def _as_distribution(p):
    return p if isinstance(p, EmpiricalDistribution) else EmpiricalDistribution.uniform(p)


def cost_matrix(p, q) -> np.ndarray:
    p, q = _as_distribution(p), _as_distribution(q)
    if p.points.shape[1] != q.points.shape[1]:
        raise ValueError(f"dimension mismatch: {p.points.shape[1]} vs {q.points.shape[1]}")
    return cdist(p.points, q.points)


def _initial_basis(C, a, b):
    """Row-minimum allocation, completed to a spanning tree with zero-flow cells."""
    n, m = C.shape
    a = a.copy()
    b = b.copy()
    flows = {}
    open_cols = b > 0
    for i in range(n):
        while a[i] > 0:
            if not open_cols.any():
                # round-off leftovers: give them to the cheapest column
                j = int(np.argmin(C[i]))
                flows[(i, j)] = flows.get((i, j), 0.0) + a[i]
                a[i] = 0.0
                break
            j = int(np.argmin(np.where(open_cols, C[i], np.inf)))
            x = min(a[i], b[j])
            flows[(i, j)] = flows.get((i, j), 0.0) + x
            if b[j] - x <= 1e-15 * max(1.0, b[j]) or x == b[j]:
                b[j] = 0.0
                open_cols[j] = False
                a[i] -= x
                if a[i] <= 1e-15:
                    a[i] = 0.0
            else:
                b[j] -= x
                a[i] = 0.0

    parent = list(range(n + m))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    basis = []
    for (i, j) in flows:
        ri, rj = find(i), find(n + j)
        if ri != rj:
            parent[ri] = rj
            basis.append((i, j))
    # join the remaining components with zero-flow cells, scanning in row-major order
    for i in range(n):
        if len(basis) == n + m - 1:
            break
        for j in range(m):
            ri, rj = find(i), find(n + j)
            if ri != rj:
                parent[ri] = rj
                basis.append((i, j))
    return basis, flows


class _Basis:
    """Basis spanning tree rooted at row node 0.

    Nodes ``0..n-1`` are rows and ``n..n+m-1`` columns.  Parent pointers and
    node potentials are updated incrementally: a pivot only touches the
    subtree that is cut off by the leaving cell.
    """

    def __init__(self, C, basis, flows):
        n, m = C.shape
        self.C, self.n, self.m = C, n, m
        self.flow = {cell: flows.get(cell, 0.0) for cell in basis}
        adj = [[] for _ in range(n + m)]
        for i, j in basis:
            adj[i].append(n + j)
            adj[n + j].append(i)
        self.parent = [-1] * (n + m)
        self.children = [set() for _ in range(n + m)]
        self.pot = np.zeros(n + m)  # u for rows, v for columns
        seen = [False] * (n + m)
        seen[0] = True
        queue = deque([0])
        while queue:
            x = queue.popleft()
            for y in adj[x]:
                if not seen[y]:
                    seen[y] = True
                    self.parent[y] = x
                    self.children[x].add(y)
                    self.pot[y] = self._cost(x, y) - self.pot[x]
                    queue.append(y)
        if not all(seen):
            raise RuntimeError("initial basis is not a spanning tree")

    def _cost(self, x, y):
        return self.C[x, y - self.n] if x < self.n else self.C[y, x - self.n]

    def _cell(self, x, y):
        return (x, y - self.n) if x < self.n else (y, x - self.n)

    def cycle(self, i, j):
        """Node path from column ``j`` to row ``i`` through the tree."""
        up_i = {}
        x, k = i, 0
        while x != -1:
            up_i[x] = k
            x, k = self.parent[x], k + 1
        left = [self.n + j]
        while left[-1] not in up_i:
            left.append(self.parent[left[-1]])
        lca = left[-1]
        right = []
        x = i
        while x != lca:
            right.append(x)
            x = self.parent[x]
        return left + right[::-1]

    def subtree(self, root):
        out, stack = [], [root]
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(self.children[x])
        return out

    def pivot(self, i, j, rc, bland=False):
        """Bring cell ``(i, j)`` with reduced cost ``rc`` into the basis; returns theta."""
        n = self.n
        nodes = self.cycle(i, j)
        edges = list(zip(nodes[:-1], nodes[1:]))
        minus = edges[0::2]
        theta = min(self.flow[self._cell(x, y)] for x, y in minus)
        ties = [e for e in minus if self.flow[self._cell(*e)] <= theta]
        leave = min(ties, key=lambda e: self._cell(*e)) if bland else ties[0]
        for k, (x, y) in enumerate(edges):
            cell = self._cell(x, y)
            self.flow[cell] += -theta if k % 2 == 0 else theta
        del self.flow[self._cell(*leave)]
        self.flow[(i, j)] = theta

        x, y = leave
        cut = x if self.parent[x] == y else y
        self.children[self.parent[cut]].discard(cut)
        members = self.subtree(cut)
        col_inside = (n + j) in set(members)
        inner, outer = (n + j, i) if col_inside else (i, n + j)
        idx = np.asarray(members)
        sign = np.where(idx < n, 1.0, -1.0)
        # rows and columns move in opposite directions so basic cells keep zero reduced cost
        self.pot[idx] += (-rc if col_inside else rc) * sign

        path = [inner]
        while path[-1] != cut:
            path.append(self.parent[path[-1]])
        for a, b in zip(path[:-1], path[1:]):
            self.children[b].discard(a)
            self.children[a].add(b)
        for k in range(len(path) - 1, 0, -1):
            self.parent[path[k]] = path[k - 1]
        self.parent[inner] = outer
        self.children[outer].add(inner)
        return theta


def exact_emd(C, a, b, max_iter: int | None = None) -> TransportPlan:
    """Optimal plan for ``min <gamma, C>`` with row sums ``a`` and column sums ``b``."""
    C = np.asarray(C, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("weight lengths must match the cost matrix")
    _check_weights(a, "source weights")
    _check_weights(b, "target weights")
    if abs(a.sum() - b.sum()) > WEIGHT_TOL:
        raise ValueError("source and target masses differ")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")

    basis, flows = _initial_basis(C, a, b)
    tree = _Basis(C, basis, flows)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(C))))
    block = max(1, min(n, 50_000 // m))
    starts = list(range(0, n, block))
    cursor = 0
    degenerate_run = 0
    bland = False
    max_iter = max_iter if max_iter is not None else 50 * (n + m) * max(n, m) + 1000
    for _ in range(max_iter):
        u, v = tree.pot[:n], tree.pot[n:]
        entering = None
        if bland:
            rc = C - u[:, None] - v[None, :]
            hits = np.flatnonzero(rc < -tol)
            if len(hits):
                r, c = divmod(int(hits[0]), m)
                entering = (r, c, rc[r, c])
        else:
            for step in range(len(starts)):
                lo = starts[(cursor + step) % len(starts)]
                rc = C[lo:lo + block] - u[lo:lo + block, None] - v[None, :]
                k = int(np.argmin(rc))
                if rc.flat[k] < -tol:
                    r, c = divmod(k, m)
                    entering = (lo + r, c, rc.flat[k])
                    cursor = (cursor + step) % len(starts)
                    break
        if entering is None:
            break
        theta = tree.pivot(*entering, bland=bland)
        if theta <= 0.0:
            degenerate_run += 1
            if degenerate_run > 10 * (n + m) and not bland:
                log.debug("switching to Bland's rule after %d degenerate pivots", degenerate_run)
                bland = True
        else:
            degenerate_run = 0
    else:
        raise RuntimeError(f"transportation simplex did not converge in {max_iter} pivots")

    gamma = np.zeros((n, m))
    for (r, c), x in tree.flow.items():
        gamma[r, c] = max(x, 0.0)
    return TransportPlan(gamma=gamma, cost=float(np.sum(gamma * C)))


def wasserstein(p, q) -> float:
    """Order-1 Wasserstein distance with Euclidean ground cost."""
    p, q = _as_distribution(p), _as_distribution(q)
    return exact_emd(cost_matrix(p, q), p.weights, q.weights).cost


def _fold_cloud(latents, idx, cap, rng: SeededRng, k):
    if cap is not None and len(idx) > cap:
        idx = idx[np.sort(rng.child("fold", k).choice(len(idx), cap, replace=False))]
    return latents[idx]


def pairwise_fold_distances(latents, fold_ids, subsample: int | None = None, rng: SeededRng | None = None,
                            threads: int = 1, K: int | None = None) -> np.ndarray:
    """Symmetric K x K matrix of Wasserstein distances between fold point clouds.

    Folds larger than ``subsample`` are reduced by a seeded draw; without a
    ``subsample`` the cap of 2000 points applies only when a pair would exceed
    the exact-solve entry limit.
    """
    latents = np.asarray(latents, dtype=np.float64)
    fold_ids = np.asarray(fold_ids)
    K = int(fold_ids.max()) + 1 if K is None else K
    rng = rng if rng is not None else SeededRng(0)
    members = [np.flatnonzero(fold_ids == k) for k in range(K)]
    for k, idx in enumerate(members):
        if len(idx) == 0:
            raise ValueError(f"fold {k} is empty")
    cap = subsample
    if cap is None:
        sizes = sorted(len(idx) for idx in members)
        if sizes[-1] * sizes[-2] > EXACT_ENTRY_LIMIT:
            cap = SUBSAMPLE_CAP
    clouds = [_fold_cloud(latents, idx, cap, rng, k) for k, idx in enumerate(members)]
    pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]

    def solve(pair):
        i, j = pair
        return wasserstein(clouds[i], clouds[j])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(solve, pairs))
    else:
        values = [solve(p) for p in pairs]
    D = np.zeros((K, K))
    for (i, j), val in zip(pairs, values):
        D[i, j] = D[j, i] = val
    return D


def mean_off_diagonal(D) -> float:
    D = np.asarray(D)
    K = len(D)
    return float((D.sum() - np.trace(D)) / (K * (K - 1)))


def write_distance_csv(path, D) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(D):
            fh.write(",".join(format(float(x), ".9g") for x in row) + "\n")


def read_distance_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return np.array([[float(x) for x in r] for r in rows])
