"""Dense two-phase simplex for the tiny LPs solved at every balance step.

Problems have a handful of variables (one weight per objective) and a few
constraints, so a plain tableau with Bland's anti-cycling rule is both fast
enough and easy to audit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LPError(RuntimeError):
    pass


class InfeasibleError(LPError):
    pass


class UnboundedError(LPError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    value: float
    iterations: int


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]


def _run(T, basis, n_cols, tol, max_iter):
    """Maximize the objective stored (negated) in the last row of ``T``."""
    it = 0
    while True:
        obj = T[-1, :n_cols]
        entering = next((j for j in range(n_cols) if obj[j] < -tol), None)
        if entering is None:
            return it
        col = T[:-1, entering]
        rhs = T[:-1, -1]
        best, leaving = np.inf, None
        for r in range(col.size):
            if col[r] > tol:
                ratio = rhs[r] / col[r]
                # Bland: smallest ratio, ties to the smallest basic index
                if ratio < best - tol or (abs(ratio - best) <= tol and basis[r] < basis[leaving]):
                    best, leaving = ratio, r
        if leaving is None:
            raise UnboundedError("objective is unbounded")
        _pivot(T, leaving, entering)
        basis[leaving] = entering
        it += 1
        if it > max_iter:
            raise LPError("simplex iteration limit reached")


def linprog_max(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, tol=1e-11, max_iter=10_000):
    """Maximize ``c @ x`` s.t. ``A_ub @ x <= b_ub``, ``A_eq @ x == b_eq``, ``x >= 0``."""
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=np.float64))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=np.float64).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=np.float64))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A_ub)) and np.all(np.isfinite(b_ub))
            and np.all(np.isfinite(A_eq)) and np.all(np.isfinite(b_eq))):
        raise ValueError("LP data must be finite")
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq

    # columns: x (n) | slacks (m_ub) | artificials (m) | rhs
    n_struct = n + m_ub
    A = np.zeros((m, n_struct))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    flip = b < 0
    A[flip] *= -1
    b[flip] *= -1

    T = np.zeros((m + 1, n_struct + m + 1))
    T[:m, :n_struct] = A
    T[:m, n_struct:n_struct + m] = np.eye(m)
    T[:m, -1] = b
    basis = list(range(n_struct, n_struct + m))
    # phase 1: maximize -sum(artificials)
    T[-1, n_struct:n_struct + m] = 1.0
    for r in range(m):
        T[-1] -= T[r]
    it = _run(T, basis, n_struct + m, tol, max_iter)
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if -T[-1, -1] > 1e-9 * scale:
        raise InfeasibleError("constraints are infeasible")

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for r in range(m):
        if basis[r] < n_struct:
            keep.append(r)
            continue
        cand = [j for j in range(n_struct) if abs(T[r, j]) > 1e-9]
        if cand:
            _pivot(T, r, cand[0])
            basis[r] = cand[0]
            keep.append(r)
    rows = keep + [m]
    T = np.hstack([T[rows, :n_struct], T[rows, -1:]])
    basis = [basis[r] for r in keep]

    # phase 2
    T[-1] = 0.0
    T[-1, :n] = -c
    for r, j in enumerate(basis):
        if T[-1, j] != 0.0:
            T[-1] -= T[-1, j] * T[r]
    it += _run(T, basis, n_struct, tol, max_iter)

    x = np.zeros(n_struct)
    for r, j in enumerate(basis):
        x[j] = T[r, -1]
    x = np.maximum(x[:n], 0.0)
    return LPResult(x=x, value=float(c @ x), iterations=it)
