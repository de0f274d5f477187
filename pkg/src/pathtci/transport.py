"""Quadratic-cost optimal transport between measures on a finite metric space.

The exact solver is a transportation simplex (MODI / u-v method) on the
support of the two measures. The entering cell is the most negative reduced
cost; after a run of degenerate pivots it switches to Bland's rule (first
eligible cell in row-major order) until a pivot makes progress again. The
leaving cell is always the lowest-index minimiser, so the pivot sequence is
fully deterministic.

Dual potentials come from the final basis and are then c-transformed so the
feasibility constraint ``g[i] <= h[j] + d(i, j)**2`` holds exactly in
floating point.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from numba import njit
from scipy.special import logsumexp

from pathtci.metric_measure import DimensionError, DiscreteMeasure

MARGINAL_TOL = 1e-9
GAP_TOL = 1e-9

# Bland's rule kicks in after this many consecutive zero-step pivots.
_DEGENERATE_STREAK = 8


@dataclass
class GapRecord:
    """Running tally of duality gaps over every exact solve in this process."""

    solved: int = 0
    max_gap: float = 0.0

    def add(self, gap: float) -> None:
        with _GAP_LOCK:
            self.solved += 1
            self.max_gap = max(self.max_gap, gap)


_GAP_LOCK = threading.Lock()
GAP_RECORD = GapRecord()


class TransportSolverError(RuntimeError):
    """The exact solver failed to reach a certified optimum."""


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (marginal residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TransportPlan:
    matrix: np.ndarray
    cost_value: float

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.matrix.sum(axis=1), self.matrix.sum(axis=0)


@dataclass(frozen=True, eq=False)
class DualPotentials:
    g: np.ndarray
    h: np.ndarray

    def gap(self, nu: DiscreteMeasure, mu: DiscreteMeasure) -> float:
        """``nu(g) - mu(h)``: the dual objective."""
        return float(nu.weights @ self.g - mu.weights @ self.h)

    def max_violation(self, cost: np.ndarray) -> float:
        """Largest ``g[i] - h[j] - cost[i, j]``; nonpositive when feasible."""
        return float((self.g[:, None] - (self.h[None, :] + cost)).max())


class W2Result(NamedTuple):
    value: float
    plan: TransportPlan
    duals: DualPotentials


# --- simplex core -----------------------------------------------------------


@njit(cache=True, nogil=True)
def _initial_basis(a, b, C):
    # least-cost rule; every allocation but the last crosses out exactly one
    # line, which leaves m + n - 1 basic cells forming a spanning tree
    m, n = C.shape
    flow = np.zeros((m, n))
    basic = np.zeros((m, n), dtype=np.bool_)
    supply = a.copy()
    demand = b.copy()
    row_done = np.zeros(m, dtype=np.bool_)
    col_done = np.zeros(n, dtype=np.bool_)
    rows_left = m
    cols_left = n
    order = np.argsort(C.ravel(), kind="mergesort")
    for idx in order:
        i = idx // n
        j = idx % n
        if row_done[i] or col_done[j]:
            continue
        if rows_left == 1:
            x = demand[j]
        elif cols_left == 1:
            x = supply[i]
        else:
            x = min(supply[i], demand[j])
        if x < 0.0:
            x = 0.0
        flow[i, j] = x
        basic[i, j] = True
        supply[i] -= x
        demand[j] -= x
        if rows_left == 1 and cols_left == 1:
            break
        if rows_left == 1:
            col_done[j] = True
            cols_left -= 1
        elif cols_left == 1:
            row_done[i] = True
            rows_left -= 1
        elif supply[i] <= demand[j]:
            row_done[i] = True
            rows_left -= 1
        else:
            col_done[j] = True
            cols_left -= 1
    return flow, basic


@njit(cache=True, nogil=True)
def _potentials(C, basic, u, v):
    # u[i] + v[j] = C[i, j] on the basis tree, rooted at u[0] = 0.
    # Returns the number of nodes reached (m + n for a spanning tree).
    m, n = C.shape
    seen_r = np.zeros(m, dtype=np.bool_)
    seen_c = np.zeros(n, dtype=np.bool_)
    queue = np.empty(m + n, dtype=np.int64)
    queue[0] = 0
    seen_r[0] = True
    u[0] = 0.0
    head = 0
    tail = 1
    while head < tail:
        node = queue[head]
        head += 1
        if node < m:
            i = node
            for j in range(n):
                if basic[i, j] and not seen_c[j]:
                    v[j] = C[i, j] - u[i]
                    seen_c[j] = True
                    queue[tail] = m + j
                    tail += 1
        else:
            j = node - m
            for i in range(m):
                if basic[i, j] and not seen_r[i]:
                    u[i] = C[i, j] - v[j]
                    seen_r[i] = True
                    queue[tail] = i
                    tail += 1
    return tail


@njit(cache=True, nogil=True)
def _tree_path(basic, start_row, end_col):
    # node sequence row -> col -> row ... -> end_col through the basis tree
    m, n = basic.shape
    parent = np.full(m + n, -1, dtype=np.int64)
    seen = np.zeros(m + n, dtype=np.bool_)
    queue = np.empty(m + n, dtype=np.int64)
    queue[0] = start_row
    seen[start_row] = True
    head = 0
    tail = 1
    target = m + end_col
    while head < tail and not seen[target]:
        node = queue[head]
        head += 1
        if node < m:
            for j in range(n):
                if basic[node, j] and not seen[m + j]:
                    seen[m + j] = True
                    parent[m + j] = node
                    queue[tail] = m + j
                    tail += 1
        else:
            j = node - m
            for i in range(m):
                if basic[i, j] and not seen[i]:
                    seen[i] = True
                    parent[i] = node
                    queue[tail] = i
                    tail += 1
    length = 0
    node = target
    while node != -1:
        length += 1
        node = parent[node]
    path = np.empty(length, dtype=np.int64)
    node = target
    for k in range(length - 1, -1, -1):
        path[k] = node
        node = parent[node]
    return path


@njit(cache=True, nogil=True)
def _transport_simplex(a, b, C, max_iter, tol):
    """Returns (flow, u, v, status, iterations). status 0 = optimal,
    1 = iteration limit, 2 = broken basis tree."""
    m, n = C.shape
    flow, basic = _initial_basis(a, b, C)
    u = np.zeros(m)
    v = np.zeros(n)
    streak = 0
    it = 0
    while it < max_iter:
        if _potentials(C, basic, u, v) != m + n:
            return flow, u, v, 2, it
        # entering cell
        ei = -1
        ej = -1
        if streak < _DEGENERATE_STREAK:
            best = -tol
            for i in range(m):
                for j in range(n):
                    r = C[i, j] - u[i] - v[j]
                    if r < best:
                        best = r
                        ei = i
                        ej = j
        else:
            found = False
            for i in range(m):
                for j in range(n):
                    if not basic[i, j] and C[i, j] - u[i] - v[j] < -tol:
                        ei = i
                        ej = j
                        found = True
                        break
                if found:
                    break
        if ei < 0:
            return flow, u, v, 0, it
        path = _tree_path(basic, ei, ej)
        # cells along the path alternate sign, starting with '-' next to the
        # entering cell (which is '+')
        k_cells = path.shape[0] - 1
        theta = np.inf
        li = -1
        lj = -1
        for k in range(k_cells):
            if k % 2 == 0:
                p = path[k]
                q = path[k + 1]
                if p < m:
                    ci = p
                    cj = q - m
                else:
                    ci = q
                    cj = p - m
                x = flow[ci, cj]
                if x < theta or (x == theta and ci * n + cj < li * n + lj):
                    theta = x
                    li = ci
                    lj = cj
        for k in range(k_cells):
            p = path[k]
            q = path[k + 1]
            if p < m:
                ci = p
                cj = q - m
            else:
                ci = q
                cj = p - m
            if k % 2 == 0:
                flow[ci, cj] -= theta
            else:
                flow[ci, cj] += theta
        flow[ei, ej] += theta
        flow[li, lj] = 0.0
        basic[li, lj] = False
        basic[ei, ej] = True
        if theta > 0.0:
            streak = 0
        else:
            streak += 1
        it += 1
    return flow, u, v, 1, it


def solve_transport(a, b, cost, max_iter: int | None = None):
    """Exact transportation problem ``min <P, cost>`` with marginals ``a, b``.

    Returns ``(plan, g, h)`` with ``g[i] <= h[j] + cost[i, j]`` everywhere and
    ``a @ g - b @ h`` equal to the optimal value. Zero-weight points are
    dropped from the LP and receive c-transformed potentials afterwards.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (a.size, b.size):
        raise DimensionError(f"cost shape {cost.shape} vs marginals {a.size}, {b.size}")
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    C = np.ascontiguousarray(cost[np.ix_(rows, cols)])
    m, n = C.shape
    if max_iter is None:
        max_iter = 50 * (m + n) ** 2 + 1000
    tol = 1e-12 * max(1.0, float(np.abs(C).max()))
    flow, u, v, status, it = _transport_simplex(a[rows], b[cols], C, max_iter, tol)
    if status == 1:
        raise TransportSolverError(f"no optimum after {it} pivots on a {m}x{n} problem")
    if status == 2:
        raise TransportSolverError(f"basis lost its spanning-tree structure at pivot {it} ({m}x{n})")

    plan = np.zeros_like(cost)
    plan[np.ix_(rows, cols)] = np.maximum(flow, 0.0)
    h = np.zeros(b.size)
    h[cols] = -v
    # off-support targets: smallest h keeping every source constraint
    g_sup = u
    if cols.size < b.size:
        off = np.setdiff1d(np.arange(b.size), cols)
        h[off] = (g_sup[:, None] - cost[np.ix_(rows, off)]).max(axis=0)
    g = (h[None, :] + cost).min(axis=1)
    return plan, g, h


# --- public operations ------------------------------------------------------


def _check_pair(nu: DiscreteMeasure, mu: DiscreteMeasure) -> None:
    if not nu.space.same_as(mu.space):
        raise DimensionError("measures live on different spaces")


def w2_squared_exact(nu: DiscreteMeasure, mu: DiscreteMeasure) -> W2Result:
    """Squared quadratic Wasserstein distance, its optimal plan, and a dual certificate."""
    _check_pair(nu, mu)
    cost = nu.space.dist**2
    matrix, g, h = solve_transport(nu.weights, mu.weights, cost)
    value = float(np.sum(matrix * cost))
    duals = DualPotentials(g, h)
    dual_value = duals.gap(nu, mu)
    GAP_RECORD.add(abs(value - dual_value))
    if abs(value - dual_value) > GAP_TOL:
        raise TransportSolverError(
            f"primal {value!r} and dual {dual_value!r} disagree by {abs(value - dual_value):.3e}"
        )
    matrix.setflags(write=False)
    return W2Result(value, TransportPlan(matrix, value), duals)


def _round_to_marginals(P, a, b):
    # Altschuler-Weed-Rigollet rounding: scale down excess rows and columns,
    # then fill the deficit with a rank-one correction
    P = P * np.minimum(1.0, a / np.maximum(P.sum(axis=1), 1e-300))[:, None]
    P = P * np.minimum(1.0, b / np.maximum(P.sum(axis=0), 1e-300))[None, :]
    err_a = a - P.sum(axis=1)
    err_b = b - P.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        P = P + np.outer(err_a, err_b) / total
    return P


def _newton_polish(K, a, b, f, g, steps: int = 60):
    """Damped Newton ascent on the entropic dual ``a.f + b.g - sum exp(K + f + g)``.

    Sinkhorn is a coordinate ascent on the same objective and crawls when the
    kernel is nearly block diagonal; Newton does not care. ``g[-1]`` is pinned
    to remove the constant shift direction.
    """

    def objective(f, g):
        with np.errstate(over="ignore"):
            return float(a @ f + b @ g - np.exp(K + f[:, None] + g[None, :]).sum())

    m = f.size
    for _ in range(steps):
        P = np.exp(K + f[:, None] + g[None, :])
        r, c = P.sum(axis=1), P.sum(axis=0)
        grad = np.concatenate([a - r, (b - c)[:-1]])
        if np.abs(grad[:m]).sum() < 1e-15:
            break
        H = np.block([[np.diag(r), P[:, :-1]], [P[:, :-1].T, np.diag(c[:-1])]])
        try:
            d = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(H, grad, rcond=None)[0]
        df, dg = d[:m], np.append(d[m:], 0.0)
        phi, slope, t = objective(f, g), float(grad @ d), 1.0
        while t > 1e-10 and not objective(f + t * df, g + t * dg) >= phi + 1e-4 * t * slope:
            t *= 0.5
        if t <= 1e-10:
            break
        f, g = f + t * df, g + t * dg
    return f, g


def sinkhorn_plan(a, b, cost, reg: float, max_iters: int = 10_000, tol: float = 1e-10):
    """Entropic OT plan by log-domain Sinkhorn iterations, rounded onto the
    transport polytope. Returns ``(plan, residual_before_rounding, iterations)``.

    Small ``reg`` is reached by annealing from the cost scale (potentials are
    carried in cost units between stages). When the marginal residual stops
    shrinking geometrically at the target ``reg``, a Newton polish on the
    dual takes over once.
    """
    if not reg > 0:
        raise ValueError("reg must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    C = np.asarray(cost, dtype=float)[np.ix_(rows, cols)]
    log_a = np.log(a[rows])
    log_b = np.log(b[cols])
    F = np.zeros(rows.size)
    G = np.zeros(cols.size)
    scale = float(C.max()) if C.size else 0.0
    stages = max(0, math.ceil(math.log2(scale / reg))) if scale > reg else 0
    for k in range(stages, 0, -1):
        eps = reg * 2.0**k
        for _ in range(50):
            F = eps * (log_a - logsumexp((G[None, :] - C) / eps, axis=1))
            G = eps * (log_b - logsumexp((F[:, None] - C) / eps, axis=0))
    K = -C / reg
    f, g = F / reg, G / reg
    residual = math.inf
    polished = False
    for it in range(1, max_iters + 1):
        f = log_a - logsumexp(K + g[None, :], axis=1)
        g = log_b - logsumexp(K + f[:, None], axis=0)
        if it % 10 == 0 or it == max_iters:
            P = np.exp(K + f[:, None] + g[None, :])
            previous = residual
            residual = float(np.abs(P.sum(axis=1) - a[rows]).sum())
            if residual < tol:
                break
            if not polished and it >= 50 and residual > 0.5 * previous:
                polished = True
                f, g = _newton_polish(K, a[rows], b[cols], f, g)
                g = log_b - logsumexp(K + f[:, None], axis=0)
                P = np.exp(K + f[:, None] + g[None, :])
                residual = float(np.abs(P.sum(axis=1) - a[rows]).sum())
                if residual < tol:
                    break
    else:
        raise SinkhornConvergenceError(f"Sinkhorn did not converge in {max_iters} iterations", residual)
    P = _round_to_marginals(np.exp(K + f[:, None] + g[None, :]), a[rows], b[cols])
    plan = np.zeros((a.size, b.size))
    plan[np.ix_(rows, cols)] = P
    return plan, residual, it


def w2_squared_sinkhorn(
    nu: DiscreteMeasure, mu: DiscreteMeasure, reg: float, max_iters: int = 10_000, tol: float = 1e-10
) -> float:
    """Transport cost of the entropic-optimal plan (after exact rounding onto
    the coupling polytope, so the value never undercuts the exact W2^2)."""
    _check_pair(nu, mu)
    cost = nu.space.dist**2
    plan, _, _ = sinkhorn_plan(nu.weights, mu.weights, cost, reg, max_iters, tol)
    return float(np.sum(plan * cost))


def optimal_coupling_glue(
    pi: TransportPlan, per_pair_measures: Mapping[tuple[int, int], DiscreteMeasure]
) -> DiscreteMeasure:
    """Mixture ``sum_ij pi[i, j] * per_pair_measures[(i, j)]`` over the plan's support."""
    support = list(zip(*np.nonzero(pi.matrix > 0)))
    if not support:
        raise ValueError("empty plan")
    missing = [ij for ij in support if ij not in per_pair_measures]
    if missing:
        raise KeyError(f"no pair measure for plan cells {missing[:5]}")
    first = per_pair_measures[support[0]]
    acc = np.zeros_like(first.weights)
    for i, j in support:
        m = per_pair_measures[(i, j)]
        if not m.space.same_as(first.space):
            raise DimensionError("pair measures live on different spaces")
        acc += pi.matrix[i, j] * m.weights
    return DiscreteMeasure.normalized(first.space, acc)
