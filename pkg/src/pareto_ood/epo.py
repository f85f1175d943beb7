"""Preference-aware descent/balance weights for multi-objective gradient steps.

Given k losses ``L``, their gradients ``G`` (k x d) and a positive preference
``p``, the balance step searches for simplex weights ``beta`` so that the
combined direction ``G.T @ beta`` moves the losses toward the ray on which all
``p_i * L_i`` are equal, without ascending the objective that currently
deviates most from it. Once the deviation is small the step switches to a
pure non-dominating descent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .simplex import InfeasibleError, LPError, linprog_max

LOSS_FLOOR = 1e-12
DEFAULT_PREFERENCE = (1.0, 1e10, 1e12)


class DegenerateLossError(ValueError):
    """All weighted losses are zero, so the normalized losses are undefined."""


class Mode(str, Enum):
    BALANCE = "balance"
    DESCENT = "descent"


def check_preference(pref, k=None):
    p = np.asarray(pref, dtype=np.float64).ravel()
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p <= 0):
        raise ValueError(f"preference entries must be positive and finite, got {p}")
    if k is not None and p.size != k:
        raise ValueError(f"preference has {p.size} entries for {k} objectives")
    return p


def normalize_losses(losses, pref):
    L = np.asarray(losses, dtype=np.float64).ravel()
    p = check_preference(pref, L.size)
    if np.any(L < 0):
        raise ValueError("losses must be non-negative")
    rl = p * L
    total = rl.sum()
    if not total > 0:
        raise DegenerateLossError("all weighted losses are zero")
    return rl / total


def divergence_mu(norm_losses):
    """KL divergence of the normalized losses from the uniform distribution."""
    q = np.asarray(norm_losses, dtype=np.float64).ravel()
    k = q.size
    pos = q > 0
    return float(np.sum(q[pos] * np.log(k * q[pos])))


def anchor_direction(losses, pref):
    """Objective-space adjustment ``p * (log(k * L_hat) - mu)``."""
    p = check_preference(pref)
    q = normalize_losses(losses, p)
    mu = divergence_mu(q)
    return p * (np.log(q.size * np.maximum(q, LOSS_FLOOR)) - mu)


@dataclass
class EpoState:
    losses: np.ndarray
    grads: np.ndarray
    pref: np.ndarray
    mu_tolerance: float = 1e-3
    lp_columns: slice | np.ndarray | None = None

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64).ravel()
        self.grads = np.atleast_2d(np.asarray(self.grads, dtype=np.float64))
        self.pref = check_preference(self.pref, self.losses.size)
        if self.grads.shape[0] != self.losses.size:
            raise ValueError("gradient matrix needs one row per objective")

    def lp_grads(self):
        return self.grads if self.lp_columns is None else self.grads[:, self.lp_columns]


@dataclass
class LpSolution:
    beta: np.ndarray
    objective_value: float
    mode: Mode
    mu: float = float("nan")
    fallback: bool = False
    active: dict = field(default_factory=dict)


def balance_program(C, a, weighted_losses):
    """Objective and ``>=`` constraints of the balance LP in Gram form.

    Returns ``(c, rows, rhs)`` with the program ``max c @ beta`` subject to
    ``rows @ beta >= rhs`` over the simplex.
    """
    Ca = C @ a
    wl = np.asarray(weighted_losses)
    j_star = np.flatnonzero(wl >= wl.max() * (1 - 1e-12))
    j_bar = np.flatnonzero(Ca <= 0)
    rows, rhs = [], []
    for j in j_bar:
        if j not in j_star:
            rows.append(C[j])
            rhs.append(Ca[j])
    for j in j_star:
        rows.append(C[j])
        rhs.append(0.0)
    return Ca, np.array(rows).reshape(-1, C.shape[0]), np.array(rhs), j_star, j_bar


def _simplex_lp(c, ge_rows, ge_rhs, extra_free=0, tie_break=True):
    """max c @ z over z = (beta, t+, t-) with beta on the simplex.

    ``ge_rows`` act on the full z. When ``tie_break`` is set a second pass
    picks, among optimal points, the beta closest to uniform in L1.
    """
    k = c.size - 2 * extra_free
    nz = c.size
    A_ub = -ge_rows if len(ge_rows) else None
    b_ub = -ge_rhs if len(ge_rows) else None
    A_eq = np.zeros((1, nz))
    A_eq[0, :k] = 1.0
    first = linprog_max(c, A_ub, b_ub, A_eq, [1.0])
    if not tie_break:
        return first.x, first.value
    v = first.value
    slack = 1e-10 * max(1.0, abs(v))
    # z2 = (z, s) with s_i >= |beta_i - 1/k|; maximize -sum(s)
    n2 = nz + k
    c2 = np.zeros(n2)
    c2[nz:] = -1.0
    ub_rows, ub_rhs = [], []
    for r, b in zip(ge_rows, ge_rhs):
        ub_rows.append(np.concatenate([-r, np.zeros(k)]))
        ub_rhs.append(-b)
    ub_rows.append(np.concatenate([-c, np.zeros(k)]))
    ub_rhs.append(-(v - slack))
    for i in range(k):
        row = np.zeros(n2)
        row[i], row[nz + i] = 1.0, -1.0
        ub_rows.append(row)
        ub_rhs.append(1.0 / k)
        row = np.zeros(n2)
        row[i], row[nz + i] = -1.0, -1.0
        ub_rows.append(row)
        ub_rhs.append(-1.0 / k)
    A_eq2 = np.zeros((1, n2))
    A_eq2[0, :k] = 1.0
    try:
        second = linprog_max(c2, np.array(ub_rows), np.array(ub_rhs), A_eq2, [1.0])
    except LPError:
        return first.x, first.value
    z = second.x[:nz]
    return z, float(c @ z)


def _descent_weights(C):
    """beta maximizing min_j (C beta)_j over the simplex."""
    k = C.shape[0]
    c = np.zeros(k + 2)
    c[k], c[k + 1] = 1.0, -1.0
    # (C beta)_j - t >= 0
    rows = np.hstack([C, -np.ones((k, 1)), np.ones((k, 1))])
    z, val = _simplex_lp(c, rows, np.zeros(k), extra_free=1)
    return z[:k], val


def _project_simplex(beta):
    beta = np.maximum(beta, 0.0)
    return beta / beta.sum()


def solve_weights(state: EpoState) -> LpSolution:
    G = state.lp_grads()
    if not np.all(np.isfinite(G)) or not np.all(np.isfinite(state.losses)):
        raise FloatingPointError("non-finite losses or gradients")
    k = state.losses.size
    C = G @ G.T
    scale = float(np.abs(C).max())
    uniform = np.full(k, 1.0 / k)
    try:
        q = normalize_losses(state.losses, state.pref)
        mu = divergence_mu(q)
    except DegenerateLossError:
        q, mu = None, 0.0
    if scale == 0.0:
        return LpSolution(uniform, 0.0, Mode.DESCENT, mu=mu)
    Cn = C / scale

    if q is not None and mu > state.mu_tolerance:
        # preference normalized to min 1 so rescaling p leaves the LP unchanged
        a = anchor_direction(state.losses, state.pref) / state.pref.min()
        Ca, rows, rhs, j_star, j_bar = balance_program(Cn, a, state.pref * state.losses)
        try:
            beta, val = _simplex_lp(Ca, rows, rhs)
            beta = _project_simplex(beta)
            return LpSolution(beta, float(val * scale), Mode.BALANCE, mu=mu,
                              active={"j_star": j_star.tolist(), "j_bar": j_bar.tolist()})
        except InfeasibleError:
            beta, val = _descent_weights(Cn)
            return LpSolution(_project_simplex(beta), float(val * scale), Mode.DESCENT,
                              mu=mu, fallback=True)
    beta, val = _descent_weights(Cn)
    return LpSolution(_project_simplex(beta), float(val * scale), Mode.DESCENT, mu=mu)


def combined_direction(grads, beta):
    return np.asarray(grads).T @ np.asarray(beta)


def epo_step(net, state: EpoState, lr, param_slice=None):
    """One update ``theta <- theta - lr * G.T @ beta*``.

    ``state.grads`` columns correspond to ``net.params[param_slice]``.
    Returns the updated parameter vector and the weight solution.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    sol = solve_weights(state)
    sl = param_slice if param_slice is not None else slice(0, net.n_params)
    net.params[sl] -= lr * combined_direction(state.grads, sol.beta)
    return net.params, sol
