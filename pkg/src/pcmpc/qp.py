"""Dense active-set solver for strictly convex quadratic programs.

Solves ``min 0.5 z'Hz + f'z  s.t.  Az <= b`` with H symmetric positive
definite.  The problem is Jacobi-scaled so wildly mixed curvatures stay
tractable, a feasible start is found with an LP phase (minimize the largest
violation), and then the textbook primal active-set iteration runs: solve
the equality-constrained subproblem on the working set, step until blocked,
add the blocking row, and drop rows with negative multipliers at a
subproblem optimum.  Problem sizes here are small (tens of variables), so
every subproblem is solved by a fresh dense KKT factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import ConditioningError, QpInfeasibleError

__all__ = ["QpSolution", "solve_qp"]

_FEAS_TOL = 1e-9
_STEP_TOL = 1e-11
_DUAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class QpSolution:
    z: np.ndarray
    duals: np.ndarray
    value: float
    active: tuple
    n_iterations: int
    kkt_stationarity: float
    kkt_primal: float
    kkt_complementarity: float


def solve_qp(H, f, A=None, b=None, max_iterations=None) -> QpSolution:
    """Solve the inequality-constrained QP to KKT residuals near machine level.

    Raises :class:`QpInfeasibleError` with a max-violation report when no
    feasible point exists and :class:`ConditioningError` when H is not
    positive definite or the iteration fails to settle.
    """
    H_orig = np.asarray(H, dtype=float)
    f_orig = np.asarray(f, dtype=float).ravel()
    n = f_orig.size
    if H_orig.shape != (n, n):
        raise ConditioningError(f"H shape {H_orig.shape} does not match f of size {n}")
    H_orig = 0.5 * (H_orig + H_orig.T)
    diag = np.diag(H_orig)
    if n and diag.min() <= 0.0:
        raise ConditioningError("QP Hessian is not positive definite")
    # symmetric Jacobi scaling; curvatures spanning many orders of magnitude
    # (softened slack blocks) otherwise wreck the KKT solves
    scale = 1.0 / np.sqrt(diag) if n else np.ones(0)
    H = H_orig * np.outer(scale, scale)
    f = f_orig * scale
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise ConditioningError("QP Hessian is not positive definite") from None

    if A is None or len(A) == 0:
        z = np.linalg.solve(H, -f)
        return _finish(
            H_orig, f_orig, np.zeros((0, n)), np.zeros(0), scale * z, np.zeros(0), [], 0
        )

    A_orig = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    m = A_orig.shape[0]
    if A_orig.shape[1] != n or b.size != m:
        raise ConditioningError("constraint dimensions do not match")
    A = A_orig * scale

    z = np.linalg.solve(H, -f)
    if np.max(A @ z - b) > _FEAS_TOL:
        z = _phase_one(A, b, z)

    if max_iterations is None:
        max_iterations = 50 * (n + m + 1)

    work: list[int] = []
    duals = np.zeros(m)
    for it in range(max_iterations):
        W = np.array(work, dtype=int)
        z_eq, lam = _equality_step(H, f, A[W], b[W])
        d = z_eq - z
        if W.size:
            # keep the step inside the working face; rounding in the KKT
            # solve otherwise leaks components that let zero-slack duplicate
            # rows pose as blockers and stall the iteration
            leak, *_ = np.linalg.lstsq(A[W], A[W] @ d, rcond=None)
            d = d - leak
        dmax = float(np.max(np.abs(d)))
        if dmax <= _STEP_TOL * max(1.0, np.max(np.abs(z))):
            if lam.size == 0 or lam.min() >= -_DUAL_TOL:
                duals = np.zeros(m)
                duals[W] = np.maximum(lam, 0.0)
                return _finish(H_orig, f_orig, A_orig, b, scale * (z + d), duals, work, it + 1)
            work.pop(int(np.argmin(lam)))
            continue
        # step toward the subproblem optimum until a new constraint blocks
        mask = np.ones(m, dtype=bool)
        mask[W] = False
        ad = A[mask] @ d
        slack = b[mask] - A[mask] @ z
        blocking_rows = np.flatnonzero(mask)
        alpha = 1.0
        block = -1
        pos = ad > 1e-11 * max(1.0, dmax)
        if np.any(pos):
            ratios = slack[pos] / ad[pos]
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha = max(ratios[j], 0.0)
                block = int(blocking_rows[np.flatnonzero(pos)[j]])
        z = z + alpha * d
        if block >= 0 and block not in work:
            if _independent(A, work, block):
                work.append(block)
    raise ConditioningError("active-set iteration did not converge")


def _phase_one(A, b, z0):
    """Find a feasible point by minimizing the worst violation via LP."""
    n = A.shape[1]
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((A.shape[0], 1))])
    bounds = [(None, None)] * n + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise ConditioningError(f"phase-1 LP failed with status {res.status}")
    if res.fun > 1e-7:
        viol = A @ res.x[:n] - b
        row = int(np.argmax(viol))
        raise QpInfeasibleError(
            f"QP infeasible: row {row} violated by {viol[row]:.3e} "
            "at the least-infeasible point",
            row=row,
            violation=float(viol[row]),
        )
    return res.x[:n]


def _equality_step(H, f, Aw, bw):
    n = H.shape[0]
    k = Aw.shape[0]
    if k == 0:
        return np.linalg.solve(H, -f), np.zeros(0)
    kkt = np.block([[H, Aw.T], [Aw, np.zeros((k, k))]])
    rhs = np.concatenate([-f, bw])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n], sol[n:]


def _independent(A, work, candidate) -> bool:
    if not work:
        return True
    Aw = A[np.array(work, dtype=int)]
    target = A[candidate]
    coef, res, *_ = np.linalg.lstsq(Aw.T, target, rcond=None)
    resid = target - Aw.T @ coef
    return np.linalg.norm(resid) > 1e-10 * max(1.0, np.linalg.norm(target))


def _finish(H, f, A, b, z, duals, work, n_iter) -> QpSolution:
    grad = H @ z + f
    if A.shape[0]:
        grad = grad + A.T @ duals
        resid = A @ z - b
        primal = float(max(0.0, resid.max()))
        comp = float(np.max(np.abs(duals * resid)))
    else:
        primal = 0.0
        comp = 0.0
    value = float(0.5 * z @ (H @ z) + f @ z)
    z = z.copy()
    z.setflags(write=False)
    return QpSolution(
        z=z,
        duals=duals,
        value=value,
        active=tuple(sorted(work)),
        n_iterations=n_iter,
        kkt_stationarity=float(np.max(np.abs(grad))),
        kkt_primal=primal,
        kkt_complementarity=comp,
    )
