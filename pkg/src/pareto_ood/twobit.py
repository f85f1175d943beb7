"""Closed-form population analysis of two-bit environments.

In environment ``(alpha, beta)`` the label is ``Y = Rad(0.5)``, the invariant
bit is ``X1 = Y * Rad(alpha)`` and the spurious bit is ``X2 = Y * Rad(beta)``,
where ``Rad(s)`` is -1 with probability ``s``. Predictors are restricted to odd
functions, parameterized by ``a = f(1, 1)`` and ``b = f(1, -1)``; a linear
model ``w1 * x1 + w2 * x2`` has ``a = w1 + w2`` and ``b = w1 - w2``.

All functions accept numpy arrays for ``a`` and ``b`` so whole grids can be
evaluated at once.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nn import pointwise_loss
from .objectives import EnvBatch

MSE_FAILURE_BAND = (0.1464, 0.8356)
LOSS_QUANTUM = 1e-12

# x-atoms with the coefficients of (a, b) giving f at that atom
_ATOMS = (
    ((1.0, 1.0), (1.0, 0.0)),
    ((-1.0, -1.0), (-1.0, 0.0)),
    ((1.0, -1.0), (0.0, 1.0)),
    ((-1.0, 1.0), (0.0, -1.0)),
)


@dataclass(frozen=True)
class TwoBitEnvSet:
    alpha: float
    betas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        for v in (self.alpha, *self.betas):
            if not 0 < v < 1:
                raise ValueError(f"flip probabilities must lie in (0, 1), got {v}")

    @property
    def n_envs(self):
        return len(self.betas)


@dataclass(frozen=True)
class OddPredictor:
    a: float
    b: float

    @classmethod
    def from_linear(cls, w1, w2):
        return cls(w1 + w2, w1 - w2)

    @property
    def x1_coef(self):
        return 0.5 * (self.a + self.b)

    @property
    def x2_coef(self):
        return 0.5 * (self.a - self.b)

    def __call__(self, x1, x2):
        return self.x1_coef * x1 + self.x2_coef * x2


@dataclass
class FrontPoint:
    predictor: OddPredictor
    losses: dict
    dominated: bool


PRESETS = {
    "fig1a": TwoBitEnvSet(0.1, (0.11, 0.4)),
    "cmnist": TwoBitEnvSet(0.25, (0.1, 0.2)),
    "cmnist_m": TwoBitEnvSet(0.1, (0.2, 0.25)),
}
TEST_BETA = {"cmnist": 0.9, "cmnist_m": 0.9, "fig1a": 0.9}


def atom_table(alpha, beta):
    """Rows ``(x1, x2, y, prob, ca, cb)`` of the 8-atom joint distribution."""
    rows = []
    for (x1, x2), (ca, cb) in _ATOMS:
        for y in (1.0, -1.0):
            p1 = 1 - alpha if x1 == y else alpha
            p2 = 1 - beta if x2 == y else beta
            rows.append((x1, x2, y, 0.5 * p1 * p2, ca, cb))
    return np.array(rows)


def atom_batches(envset):
    """Environments as weighted atom batches: exact population objectives."""
    out = []
    for e, beta in enumerate(envset.betas):
        t = atom_table(envset.alpha, beta)
        out.append(EnvBatch(e, t[:, :2], t[:, 2], weights=t[:, 3]))
    return out


def _ab(pred):
    if isinstance(pred, OddPredictor):
        return pred.a, pred.b
    a, b = pred
    return np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)


def moments(pred, alpha, beta):
    """``(E[f^2], E[fY])`` in closed form."""
    a, b = _ab(pred)
    ef2 = (1 - alpha) * a**2 + alpha * b**2 + beta * (1 - 2 * alpha) * (b**2 - a**2)
    efy = (1 - alpha) * a - alpha * b - beta * (a - b)
    return ef2, efy


def _atom_expect(pred, alpha, beta, loss_kind, what):
    a, b = _ab(pred)
    t = atom_table(alpha, beta)
    total = 0.0
    for _, _, y, p, ca, cb in t:
        f = ca * a + cb * b
        loss, d1, d2 = pointwise_loss(np.asarray(f, dtype=np.float64), y, loss_kind)
        if what == "loss":
            total = total + p * loss
        elif what == "residual":
            total = total + p * d1 * f
        elif what == "grad":
            total = total + p * d1 * np.stack([np.full_like(f, ca), np.full_like(f, cb)])
        elif what == "residual_grad":
            g = d2 * f + d1
            total = total + p * g * np.stack([np.full_like(f, ca), np.full_like(f, cb)])
    return total


def pop_loss(pred, alpha, beta, loss_kind="mse"):
    if loss_kind == "mse":
        ef2, efy = moments(pred, alpha, beta)
        return 0.5 * (ef2 - 2 * efy + 1)
    return _atom_expect(pred, alpha, beta, loss_kind, "loss")


def pop_loss_grad(pred, alpha, beta, loss_kind="mse"):
    """Gradient of the population loss with respect to ``(a, b)``."""
    if loss_kind == "mse":
        a, b = _ab(pred)
        c = beta * (1 - 2 * alpha)
        da = (1 - alpha) * a - c * a - ((1 - alpha) - beta)
        db = alpha * b + c * b - (beta - alpha)
        return np.stack([da, db])
    return _atom_expect(pred, alpha, beta, loss_kind, "grad")


def irms_residual(pred, alpha, beta, loss_kind="mse"):
    """Dummy-classifier gradient ``d/dw L_e(w f)`` at ``w = 1``."""
    if loss_kind == "mse":
        ef2, efy = moments(pred, alpha, beta)
        return ef2 - efy
    return _atom_expect(pred, alpha, beta, loss_kind, "residual")


def population_objectives(pred, envset, loss_kind="mse"):
    """Per-env losses, ERM loss, IRMv1 penalty (sum) and V-REx variance."""
    env = [pop_loss(pred, envset.alpha, be, loss_kind) for be in envset.betas]
    res = [irms_residual(pred, envset.alpha, be, loss_kind) for be in envset.betas]
    env_arr = np.stack(env)
    return {
        "env": env,
        "erm": env_arr.mean(axis=0),
        "irm": sum(r**2 for r in res),
        "vrex": env_arr.var(axis=0),
    }


def failure_range_check(alpha, loss_kind="mse"):
    """Whether ``alpha`` lies in the known IRMS/IRMv1 failure band (MSE only)."""
    if loss_kind != "mse":
        raise ValueError("the failure band is only stated for the square loss")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lo, hi = MSE_FAILURE_BAND
    return bool(alpha < lo or alpha > hi)


# -- root finding ---------------------------------------------------------

def _system(envset, loss_kind, which):
    def residuals(a, b):
        parts = []
        if which in ("S", "SX"):
            parts += [irms_residual((a, b), envset.alpha, be, loss_kind) for be in envset.betas]
        if which in ("X", "SX"):
            losses = [pop_loss((a, b), envset.alpha, be, loss_kind) for be in envset.betas]
            parts += [lo - losses[0] for lo in losses[1:]]
        return np.stack([np.broadcast_to(p, np.shape(a)) for p in parts], axis=-1)
    return residuals


def _refine(fn, a, b, iters=50, h=1e-7):
    """Damped Gauss-Newton with a forward-difference Jacobian, vectorized over seeds."""
    a = a.astype(np.float64).copy()
    b = b.astype(np.float64).copy()
    r = fn(a, b)
    norm = np.linalg.norm(r, axis=-1)
    for _ in range(iters):
        ja = (fn(a + h, b) - r) / h
        jb = (fn(a, b + h) - r) / h
        J = np.stack([ja, jb], axis=-1)  # (n, m, 2)
        step = -np.einsum("nij,nj->ni", np.linalg.pinv(J), r)
        t = np.ones_like(a)
        new_a, new_b = a + step[:, 0], b + step[:, 1]
        new_r = fn(new_a, new_b)
        new_norm = np.linalg.norm(new_r, axis=-1)
        for _ in range(8):
            worse = ~(new_norm <= norm)
            if not worse.any():
                break
            t[worse] *= 0.5
            new_a = np.where(worse, a + t * step[:, 0], new_a)
            new_b = np.where(worse, b + t * step[:, 1], new_b)
            new_r = fn(new_a, new_b)
            new_norm = np.linalg.norm(new_r, axis=-1)
        ok = new_norm <= norm
        a = np.where(ok, new_a, a)
        b = np.where(ok, new_b, b)
        r = np.where(ok[:, None], new_r, r)
        norm = np.where(ok, new_norm, norm)
    return a, b, norm


def _dedup(points, dist):
    kept = []
    for p in points[np.lexsort((points[:, 1], points[:, 0]))]:
        if all(np.hypot(*(p - q)) > dist for q in kept):
            kept.append(p)
    return np.array(kept).reshape(-1, 2)


def _local_minima(norm):
    padded = np.pad(norm, 1, constant_values=np.inf)
    n0, n1 = norm.shape
    mask = np.ones_like(norm, dtype=bool)
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if da == db == 0:
                continue
            mask &= norm <= padded[1 + da:1 + da + n0, 1 + db:1 + db + n1]
    return mask


def _roots(fn, A, B, tol, dedup, curve=False):
    R = fn(A, B)
    norm = np.linalg.norm(R, axis=-1)
    if curve:
        s = np.sign(R[..., 0])
        cross = np.zeros_like(norm, dtype=bool)
        cross[:, :-1] |= s[:, :-1] != s[:, 1:]
        cross[:-1, :] |= s[:-1, :] != s[1:, :]
        seeds = cross
    else:
        seeds = _local_minima(norm)
    a, b, final = _refine(fn, A[seeds], B[seeds])
    good = final < tol
    pts = np.column_stack([a[good], b[good]])
    return _dedup(pts, dedup) if pts.size else pts.reshape(0, 2)


def solve_invariant_sets(envset, loss_kind="mse", grid=601, limit=3.0, tol=1e-10, dedup=1e-6,
                         curve_grid=121):
    """Roots of the IRMS constraints, the equal-risk constraint and both together.

    ``I_X`` is a curve in the (a, b) plane; it is sampled from sign changes on a
    ``curve_grid`` x ``curve_grid`` mesh rather than the fine root-finding grid.
    """
    if len(set(envset.betas)) < 2:
        raise ValueError("need at least two distinct betas")
    axis = np.linspace(-limit, limit, grid)
    A, B = np.meshgrid(axis, axis, indexing="ij")
    caxis = np.linspace(-limit, limit, curve_grid)
    CA, CB = np.meshgrid(caxis, caxis, indexing="ij")
    return {
        "I_S": _roots(_system(envset, loss_kind, "S"), A, B, tol, dedup),
        "I_X": _roots(_system(envset, loss_kind, "X"), CA, CB, tol, dedup, curve=True),
        "intersection": _roots(_system(envset, loss_kind, "SX"), A, B, tol, dedup),
    }


def f_irm(alpha, loss_kind="mse"):
    c = 1 - 2 * alpha if loss_kind == "mse" else np.log((1 - alpha) / alpha)
    return OddPredictor(c, c)


# -- Pareto scans ---------------------------------------------------------

def dominated_mask(F, chunk=256):
    """Exact brute-force domination flags for the rows of ``F`` (minimization)."""
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    out = np.zeros(n, dtype=bool)
    for start in range(0, n, chunk):
        P = F[start:start + chunk]
        le = np.all(F[None, :, :] <= P[:, None, :], axis=2)
        lt = np.any(F[None, :, :] < P[:, None, :], axis=2)
        out[start:start + chunk] = np.any(le & lt, axis=1)
    return out


def scan_table(envset, a, b, loss_kind="mse"):
    """Loss columns for predictors ``(a[i], b[i])``, quantized for exact comparison."""
    obj = population_objectives((a, b), envset, loss_kind)
    cols = {"a": np.asarray(a, dtype=np.float64), "b": np.asarray(b, dtype=np.float64)}
    for e, lo in enumerate(obj["env"], start=1):
        cols[f"L_e{e}"] = lo
    cols["L_erm"] = obj["erm"]
    cols["L_irm"] = obj["irm"]
    cols["L_vrex"] = obj["vrex"]
    for k in list(cols):
        if k.startswith("L_"):
            cols[k] = np.round(np.asarray(cols[k], dtype=np.float64) / LOSS_QUANTUM) * LOSS_QUANTUM
    return cols


def pareto_scan(envset, loss_kind="mse", grid=121, limit=3.0, objectives=("L_e1", "L_e2"),
                extra_points=None, include_roots=True):
    """Grid scan over odd predictors with brute-force domination flags.

    Invariant-set roots are added to the candidate set by default so that the
    exact constraint solutions take part in the comparison. Loss values are
    quantized to ``LOSS_QUANTUM`` before the exact comparison.
    """
    axis = np.linspace(-limit, limit, grid)
    A, B = np.meshgrid(axis, axis, indexing="ij")
    pts = [np.column_stack([A.ravel(), B.ravel()])]
    if include_roots:
        roots = solve_invariant_sets(envset, loss_kind)
        pts += [roots["I_S"], roots["intersection"]]
    if extra_points is not None:
        pts.append(np.asarray(extra_points, dtype=np.float64).reshape(-1, 2))
    P = np.unique(np.vstack(pts), axis=0)
    cols = scan_table(envset, P[:, 0], P[:, 1], loss_kind)
    F = np.column_stack([cols[o] for o in objectives])
    dom = dominated_flags(F)
    names = [k for k in cols if k.startswith("L_")]
    return [
        FrontPoint(OddPredictor(float(P[i, 0]), float(P[i, 1])),
                   {k: float(cols[k][i]) for k in names}, bool(dom[i]))
        for i in range(P.shape[0])
    ]


def dominated_flags(F):
    """Exact domination flags via a lexicographic sweep.

    Any dominator of a row sorts lexicographically before it, and every
    dominated row is dominated by some non-dominated one, so each row only
    needs comparing against the non-dominated rows seen so far.
    """
    F = np.asarray(F, dtype=np.float64)
    order = np.lexsort(F.T[::-1])
    out = np.zeros(F.shape[0], dtype=bool)
    front = np.empty((0, F.shape[1]))
    for i in order:
        row = F[i]
        if front.shape[0] and np.any(np.all(front <= row, axis=1) & np.any(front < row, axis=1)):
            out[i] = True
        else:
            front = np.vstack([front, row])
    return out


def is_dominated(target, points, objectives):
    """Whether some point in ``points`` dominates ``target`` on ``objectives``."""
    t = np.array([target.losses[o] for o in objectives])
    F = np.array([[p.losses[o] for o in objectives] for p in points])
    return bool(np.any(np.all(F <= t, axis=1) & np.any(F < t, axis=1)))


def find_point(points, pred, tol=1e-9):
    for p in points:
        if abs(p.predictor.a - pred.a) <= tol and abs(p.predictor.b - pred.b) <= tol:
            return p
    raise KeyError(f"{pred} not among the scanned points")


def reweighted_stationarity(pred, envset, loss_kind="mse", tol=1e-8):
    """Weights ``lambda`` (summing to 1) with ``sum lambda_e grad L_e = 0``, else None."""
    if envset.n_envs != 2:
        raise ValueError("reweighted stationarity is solved for two environments")
    g = [np.asarray(pop_loss_grad(pred, envset.alpha, be, loss_kind), dtype=np.float64)
         for be in envset.betas]
    M = np.array([[g[0][0], g[1][0]], [g[0][1], g[1][1]], [1.0, 1.0]])
    rhs = np.array([0.0, 0.0, 1.0])
    if np.linalg.matrix_rank(M, tol=1e-12) < 2:
        return None
    lam, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    if np.linalg.norm(M @ lam - rhs) > tol * max(1.0, np.abs(M).max()):
        return None
    return lam


def write_front_csv(path, points, env_count=2):
    header = (["a", "b"] + [f"L_e{e}" for e in range(1, env_count + 1)]
              + ["L_erm", "L_irm", "L_vrex", "dominated"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for p in points:
            w.writerow([repr(p.predictor.a), repr(p.predictor.b)]
                       + [repr(p.losses[h]) for h in header[2:-1]] + [int(p.dominated)])
