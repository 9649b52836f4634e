"""L1-of-affine minimisation backends.

Every problem here has the form::

    minimise   cost^T x + weight * ||M x + c||_1
    subject to lo <= x <= hi             (optional)
               ||M x + c||_1 <= budget   (constrained variant)

solved either as a linear program (HiGHS through scipy) or by projected
subgradient descent with Polyak steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


class SolverFailure(RuntimeError):
    pass


@dataclass
class L1Result:
    x: np.ndarray
    value: float
    status: str  # "optimal" | "unbounded" | "infeasible"
    iterations: int = 0
    backend: str = "lp"


def _bounds(n, box):
    if box is None:
        return [(None, None)] * n
    return [(-box, box)] * n


def l1_min_lp(M: np.ndarray, c: np.ndarray, cost: np.ndarray | None = None, weight: float = 1.0,
              box: float | None = None) -> L1Result:
    """``min cost^T x + weight ||Mx + c||_1`` as an LP in ``(x, t)``."""
    m, n = M.shape
    cost = np.zeros(n) if cost is None else np.asarray(cost, dtype=float)
    obj = np.concatenate([cost, np.full(m, weight)])
    eye = np.eye(m)
    a_ub = np.block([[M, -eye], [-M, -eye]])
    b_ub = np.concatenate([-c, c])
    bounds = _bounds(n, box) + [(0, None)] * m
    res = linprog(obj, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 3:
        return L1Result(np.full(n, np.nan), -np.inf, "unbounded", res.nit)
    if res.status != 0:
        raise SolverFailure(f"LP failed: {res.message}")
    x = res.x[:n]
    return L1Result(x, float(cost @ x + weight * np.abs(M @ x + c).sum()), "optimal", res.nit)


def l1_constrained_lp(cost: np.ndarray, M: np.ndarray, c: np.ndarray, budget: float,
                      box: float | None = None) -> L1Result:
    """``min cost^T x`` subject to ``||Mx + c||_1 <= budget``."""
    m, n = M.shape
    obj = np.concatenate([np.asarray(cost, dtype=float), np.zeros(m)])
    eye = np.eye(m)
    a_ub = np.block([[M, -eye], [-M, -eye], [np.zeros((1, n)), np.ones((1, m))]])
    b_ub = np.concatenate([-c, c, [budget]])
    bounds = _bounds(n, box) + [(0, None)] * m
    res = linprog(obj, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status == 3:
        return L1Result(np.full(n, np.nan), -np.inf, "unbounded", res.nit)
    if res.status == 2:
        return L1Result(np.full(n, np.nan), np.inf, "infeasible", res.nit)
    if res.status != 0:
        raise SolverFailure(f"LP failed: {res.message}")
    x = res.x[:n]
    return L1Result(x, float(cost @ x), "optimal", res.nit)


def l1_min_subgradient(M: np.ndarray, c: np.ndarray, box: float | None = None, x0: np.ndarray | None = None,
                       max_iter: int = 100_000, tol: float = 1e-7, target: float | None = 0.0,
                       precondition: bool = True, patience: int = 2000) -> L1Result:
    """Subgradient descent on ``||Mx + c||_1``.

    Steps are taken in whitened coordinates ``x = P y`` with
    ``P = V diag(1/sigma)`` from the SVD of ``M``, so that ``M P`` has
    orthonormal columns.  A box is handled by an exact penalty
    ``mu * sum(max(|x| - box, 0))`` with ``mu`` above the largest column
    l1-norm of ``M``.  Polyak steps aim at ``max(target, best - delta)``;
    ``delta`` is halved, restarting from the best point, after ``patience``
    iterations without improvement.
    """
    n = M.shape[1]
    if precondition:
        _, sv, vt = np.linalg.svd(M, full_matrices=False)
        keep = sv > sv[0] * 1e-12
        P = vt[keep].T / sv[keep]
    else:
        P = np.eye(n)
    MP = M @ P
    mu = 0.0 if box is None else 10.0 * max(np.abs(M).sum(axis=0).max(), 1.0)

    def objective(x):
        f = np.abs(M @ x + c).sum()
        if box is not None:
            f += mu * np.maximum(np.abs(x) - box, 0.0).sum()
        return f

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if box is not None:
        x = np.clip(x, -box, box)
    y = np.linalg.lstsq(P, x, rcond=None)[0]
    x = P @ y
    f = objective(x)
    best_x, best_f = x.copy(), f
    level = -np.inf if target is None else target
    delta = max(best_f, 1.0)
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        if best_f - level <= tol:
            break
        g = MP.T @ np.where(M @ x + c >= 0, 1.0, -1.0)
        if box is not None:
            g = g + mu * (P.T @ (np.sign(x) * (np.abs(x) > box)))
        gg = g @ g
        if gg == 0.0:
            break
        aim = max(level, best_f - delta)
        y = y - (f - aim) / gg * g
        x = P @ y
        f = objective(x)
        if f < best_f - 1e-15:
            best_x, best_f, stall = x.copy(), f, 0
        else:
            stall += 1
        if stall >= patience:
            delta *= 0.5
            stall = 0
            x, f = best_x.copy(), best_f
            y = np.linalg.lstsq(P, x, rcond=None)[0]
            if delta < 1e-3 * tol:
                break
    if box is not None:
        best_x = _polish(M, c, box, np.clip(best_x, -box, box))
    value = float(np.abs(M @ best_x + c).sum())
    status = "optimal" if (it < max_iter or value - (level if target is not None else 0) <= tol) else "iteration_cap"
    return L1Result(best_x, value, status, it, "subgradient")


def _polish(M, c, box, x):
    """Active-set refinement of a near-optimal box-feasible point.

    An optimal vertex has every free coordinate pinned by a zero residual.
    Coordinates near the box are fixed, the smallest residuals are set to zero,
    and the candidate is kept only when it improves the objective.
    """
    best_x, best_f = x, np.abs(M @ x + c).sum()
    r = M @ x + c
    for eps in (1e-1, 3e-2, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        fixed = np.abs(x) >= box * (1.0 - eps)
        free = np.flatnonzero(~fixed)
        rows = np.argsort(np.abs(r), kind="stable")[: free.size]
        cand = np.where(fixed, np.sign(x) * box, 0.0)
        if free.size:
            try:
                cand[free] = np.linalg.solve(M[np.ix_(rows, free)], -(c[rows] + M[rows] @ cand))
            except np.linalg.LinAlgError:
                continue
        if np.max(np.abs(cand)) > box * (1.0 + 1e-12):
            continue
        cand = np.clip(cand, -box, box)
        f = np.abs(M @ cand + c).sum()
        if f < best_f:
            best_x, best_f = cand, f
    return best_x


def l1_min(M: np.ndarray, c: np.ndarray, box: float | None = None, backend: str = "auto", **kw) -> L1Result:
    """``min ||Mx + c||_1`` (optionally box-constrained) with the chosen backend.

    ``auto`` first tries the square system ``Mx = -c``: a well-conditioned
    solution inside the box attains the global minimum zero; otherwise it
    falls back to the LP.
    """
    if backend == "auto":
        if M.shape[0] == M.shape[1] and np.linalg.cond(M) < 1e10:
            x = np.linalg.solve(M, -c)
            if box is None or np.max(np.abs(x)) <= box:
                return L1Result(x, float(np.abs(M @ x + c).sum()), "optimal", 1, "solve")
        backend = "lp"
    if backend == "lp":
        return l1_min_lp(M, c, box=box)
    if backend == "subgradient":
        return l1_min_subgradient(M, c, box=box, **kw)
    raise ValueError(f"unknown backend {backend!r}")
