"""Thin wrapper around Clarabel for convex quadratic programs.

    minimize    0.5 x'Px + q'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                b_k - A_k x in SOC(3)   for each second-order block k
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp


@dataclass
class QPResult:
    x: Optional[np.ndarray]
    objective: float
    status: str

    @property
    def ok(self) -> bool:
        return self.status in ("Solved", "AlmostSolved")

    @property
    def infeasible(self) -> bool:
        return "Infeasible" in self.status


def _settings(tol: float) -> clarabel.DefaultSettings:
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.max_iter = 200
    s.presolve_enable = True
    return s


def solve_stacked(diag, q, A, b, n_eq: int, tol: float = 1e-10) -> QPResult:
    """Diagonal-Hessian QP with constraints pre-stacked: ``n_eq`` equality rows first."""
    n = q.shape[0]
    idx = np.arange(n + 1, dtype=np.int64)
    P = sp.csc_matrix((np.asarray(diag, float), idx[:-1], idx), shape=(n, n))
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if A.shape[0] > n_eq:
        cones.append(clarabel.NonnegativeConeT(A.shape[0] - n_eq))
    solver = clarabel.DefaultSolver(P, np.asarray(q, float), A, np.asarray(b, float), cones, _settings(tol))
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        return QPResult(np.array(sol.x), float(sol.obj_val), status)
    return QPResult(None, np.inf, status)


def solve_qp(P, q, A_eq=None, b_eq=None, A_in=None, b_in=None, soc=None, tol: float = 1e-10) -> QPResult:
    n = q.shape[0]
    P = sp.triu(sp.csc_matrix(P), format="csc")
    blocks, rhs, cones = [], [], []
    if A_eq is not None and A_eq.shape[0]:
        blocks.append(sp.csc_matrix(A_eq))
        rhs.append(np.asarray(b_eq, float))
        cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
    if A_in is not None and A_in.shape[0]:
        blocks.append(sp.csc_matrix(A_in))
        rhs.append(np.asarray(b_in, float))
        cones.append(clarabel.NonnegativeConeT(A_in.shape[0]))
    if soc is not None and soc[0].shape[0]:
        A_soc, b_soc = soc
        blocks.append(sp.csc_matrix(A_soc))
        rhs.append(np.asarray(b_soc, float))
        cones.extend(clarabel.SecondOrderConeT(3) for _ in range(A_soc.shape[0] // 3))
    if blocks:
        A = sp.vstack(blocks, format="csc")
        b = np.concatenate(rhs)
    else:
        A = sp.csc_matrix((0, n))
        b = np.zeros(0)
    solver = clarabel.DefaultSolver(P, np.asarray(q, float), A, b, cones, _settings(tol))
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        return QPResult(np.array(sol.x), float(sol.obj_val), status)
    return QPResult(None, np.inf, status)
