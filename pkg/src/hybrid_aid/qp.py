"""Primal active-set solvers for strictly convex QPs.

    min ½ Uᵀ H U + gᵀ U   s.t.  lb ≤ U ≤ ub,  A U ≤ b (optional rows)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

_FREE, _LOWER, _UPPER = 0, -1, 1


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A: np.ndarray | None = None  # general rows A U ≤ b
    b: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        n = self.g.shape[0]
        if self.H.shape != (n, n) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("inconsistent QP dimensions")
        if np.any(self.lb > self.ub):
            raise ValueError("lb must not exceed ub")
        if (self.A is None) != (self.b is None):
            raise ValueError("A and b come together")
        if self.A is not None:
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
            self.b = np.asarray(self.b, dtype=float).reshape(-1)
            if self.A.shape != (self.b.shape[0], n):
                raise ValueError("A must be m x n with b of length m")
            if self.A.shape[0] == 0:
                self.A = self.b = None

    @property
    def has_rows(self) -> bool:
        return self.A is not None

    def objective(self, u: np.ndarray) -> float:
        return float(0.5 * u @ self.H @ u + self.g @ u)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All constraints as G U ≤ h: upper bounds, lower bounds, then general rows."""
        n = self.g.shape[0]
        eye = np.eye(n)
        G = [eye, -eye]
        h = [self.ub, -self.lb]
        if self.A is not None:
            G.append(self.A)
            h.append(self.b)
        G, h = np.vstack(G), np.concatenate(h)
        finite = np.isfinite(h)
        return G[finite], h[finite]

    def max_violation(self, u: np.ndarray) -> float:
        G, h = self.stacked()
        return float(np.max(G @ u - h, initial=0.0))


@dataclass
class QpResult:
    u: np.ndarray
    status: str
    iterations: int
    kkt_residual: float

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residual(qp: QpProblem, u: np.ndarray, multipliers: np.ndarray | None = None) -> float:
    """KKT residual at ``u``.

    Box-only problems use the projected-gradient norm ``|u - clip(u - ∇f(u))|∞``.
    With general rows the caller passes multipliers for ``qp.stacked()`` and the
    residual is the worst of stationarity, primal infeasibility, dual sign and
    complementarity.
    """
    grad = qp.H @ u + qp.g
    if not qp.has_rows:
        return float(np.max(np.abs(u - np.clip(u - grad, qp.lb, qp.ub)), initial=0.0))
    G, h = qp.stacked()
    lam = np.zeros(G.shape[0]) if multipliers is None else multipliers
    slack = G @ u - h
    return float(max(np.max(np.abs(grad + G.T @ lam), initial=0.0), np.max(slack, initial=0.0),
                     np.max(-lam, initial=0.0), np.max(np.abs(lam * slack), initial=0.0)))


def solve_qp(qp: QpProblem, u0: np.ndarray | None = None, max_iter: int | None = None,
             tol: float = 1e-12) -> QpResult:
    """Active-set iterations from a feasible start; ties break on lowest index.

    Each iteration either releases the bound with the most negative multiplier,
    or moves toward the subspace minimizer and fixes the first blocking bound.
    """
    if qp.has_rows:
        return _solve_general(qp, u0, max_iter, tol)
    H, g, lb, ub = qp.H, qp.g, qp.lb, qp.ub
    n = g.shape[0]
    if max_iter is None:
        max_iter = 20 * n
    u = np.clip(np.zeros(n) if u0 is None else np.asarray(u0, dtype=float), lb, ub)
    state = np.full(n, _FREE)
    fixed_eq = lb == ub
    state[fixed_eq] = _LOWER
    # start with bounds the warm start sits on as active
    state[(u <= lb) & ~fixed_eq] = _LOWER
    state[(u >= ub) & ~fixed_eq] = _UPPER

    for it in range(1, max_iter + 1):
        free = state == _FREE
        grad = H @ u + g
        if free.any():
            hf = H[np.ix_(free, free)]
            step_f = -np.linalg.solve(hf, grad[free])
        else:
            step_f = np.zeros(0)

        if np.max(np.abs(step_f), initial=0.0) <= tol * (1.0 + np.max(np.abs(u), initial=0.0)):
            # stationary on the current face: check multipliers of active bounds
            lam = grad.copy()
            worst, worst_val = -1, 0.0
            for i in range(n):
                if state[i] == _FREE or fixed_eq[i]:
                    continue
                # at lower bound optimality needs grad ≥ 0, at upper grad ≤ 0
                viol = -lam[i] if state[i] == _LOWER else lam[i]
                if viol > worst_val + tol * (1.0 + abs(lam[i])):
                    worst, worst_val = i, viol
            if worst < 0:
                return QpResult(u, OPTIMAL, it, kkt_residual(qp, u))
            state[worst] = _FREE
            continue

        # longest feasible fraction of the step
        step = np.zeros(n)
        step[free] = step_f
        alpha, block, block_side = 1.0, -1, _FREE
        for i in np.flatnonzero(free):
            if step[i] < 0:
                a = (lb[i] - u[i]) / step[i]
                side = _LOWER
            elif step[i] > 0:
                a = (ub[i] - u[i]) / step[i]
                side = _UPPER
            else:
                continue
            if a < alpha:
                alpha, block, block_side = max(a, 0.0), i, side
        u = u + alpha * step
        if block >= 0:
            u[block] = lb[block] if block_side == _LOWER else ub[block]
            state[block] = block_side
        np.clip(u, lb, ub, out=u)

    return QpResult(u, MAX_ITER, max_iter, kkt_residual(qp, u))


def _solve_general(qp: QpProblem, u0: np.ndarray | None, max_iter: int | None, tol: float) -> QpResult:
    """Working-set method on G U ≤ h; needs a feasible ``u0`` (else a phase-1 LP finds one)."""
    G, h = qp.stacked()
    H, g = qp.H, qp.g
    n, m = g.shape[0], G.shape[0]
    if max_iter is None:
        max_iter = 20 * n
    feas_tol = 1e-9
    u = None if u0 is None else np.asarray(u0, dtype=float).copy()
    if u is None or np.any(G @ u - h > feas_tol):
        u = _phase_one(G, h, n)
        if u is None:
            return QpResult(np.clip(np.zeros(n), qp.lb, qp.ub), INFEASIBLE, 0, math.inf)

    # initial working set: rows active at the start, kept linearly independent
    work: list[int] = []
    for i in np.flatnonzero(np.abs(G @ u - h) <= feas_tol):
        trial = G[work + [int(i)]]
        if np.linalg.matrix_rank(trial) == len(work) + 1:
            work.append(int(i))

    lam_full = np.zeros(m)
    for it in range(1, max_iter + 1):
        grad = H @ u + g
        k = len(work)
        if k:
            gw = G[work]
            kkt = np.block([[H, gw.T], [gw, np.zeros((k, k))]])
            sol = np.linalg.solve(kkt, np.concatenate([-grad, np.zeros(k)]))
            step, lam = sol[:n], sol[n:]
        else:
            step, lam = -np.linalg.solve(H, grad), np.zeros(0)

        if np.max(np.abs(step), initial=0.0) <= tol * (1.0 + np.max(np.abs(u), initial=0.0)):
            # most negative multiplier leaves; ties go to the lowest row index
            worst, worst_val = -1, 0.0
            for j, row in sorted(enumerate(work), key=lambda jr: jr[1]):
                if -lam[j] > worst_val + tol * (1.0 + abs(lam[j])):
                    worst, worst_val = j, -lam[j]
            if worst < 0:
                lam_full[:] = 0.0
                lam_full[work] = lam
                return QpResult(u, OPTIMAL, it, kkt_residual(qp, u, lam_full))
            work.pop(worst)
            continue

        alpha, block = 1.0, -1
        in_work = set(work)
        gp = G @ step
        # rows dependent on the working set see only round-off here
        gp_tol = 1e-12 * np.linalg.norm(G, axis=1) * np.linalg.norm(step)
        for i in range(m):
            if i in in_work or gp[i] <= gp_tol[i]:
                continue
            a = (h[i] - G[i] @ u) / gp[i]
            if a < alpha:
                alpha, block = max(a, 0.0), i
        u = u + alpha * step
        if block >= 0:
            work.append(block)

    return QpResult(u, MAX_ITER, max_iter, kkt_residual(qp, u))


def _phase_one(G: np.ndarray, h: np.ndarray, n: int) -> np.ndarray | None:
    res = linprog(np.zeros(n), A_ub=G, b_ub=h, bounds=[(None, None)] * n, method="highs")
    return res.x if res.status == 0 else None
