"""Checkpoint selection by preference-weighted loss, and the eps-satisfaction metric.

The selection score of a logged step is ``L @ p_hat`` with ``p_hat = p / sum(p)``.
By default the step with the *smallest* score is kept per run: the score is a
weighted loss, and maximizing it would pick the model furthest from the
preferred trade-off. ``score_direction="maximize_raw_score"`` keeps the literal
alternative available.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .epo import check_preference

DIRECTIONS = ("minimize_weighted_loss", "maximize_raw_score")


def _weighted(losses, pref):
    L = np.asarray(losses, dtype=np.float64).ravel()
    p = check_preference(pref)
    if p.size != L.size:
        raise ValueError(f"{L.size} losses but {p.size} preference entries")
    return L, p


def pair_score(losses, pref):
    L, p = _weighted(losses, pref)
    return float(L @ (p / p.sum()))


def pareto_satisfaction(losses, pref):
    """``max_ij |p_i L_i - p_j L_j| / sum_j p_j L_j``; 0 when every weighted loss is 0."""
    L, p = _weighted(losses, pref)
    wl = p * L
    total = wl.sum()
    if total == 0:
        return 0.0
    return float((wl.max() - wl.min()) / total)


def constraint_set_membership(losses, pref, eps):
    """Whether all weighted losses lie within ``eps`` of each other (unnormalized)."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    L, p = _weighted(losses, pref)
    wl = p * L
    return bool(wl.max() - wl.min() <= eps)


@dataclass(frozen=True)
class SelectionConfig:
    preference: tuple = (1.0, 1e10, 1e12)
    cutoff: int = 0
    percentile: float = 0.5
    score_direction: str = "minimize_weighted_loss"

    def __post_init__(self):
        check_preference(self.preference)
        if not 0 <= self.percentile <= 1:
            raise ValueError("percentile must lie in [0, 1]")
        if self.cutoff < 0:
            raise ValueError("cutoff must be non-negative")
        if self.score_direction not in DIRECTIONS:
            raise ValueError(f"score_direction must be one of {DIRECTIONS}")


@dataclass
class SelectionResult:
    chosen_run: str
    chosen_step: int
    score: float
    val_acc: float
    satisfaction: float
    fallback: bool = False
    candidates: list = None

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _best_step(history, cfg, losses_of):
    steps = [s for s in history.steps if s["step"] >= cfg.cutoff]
    if not steps:
        raise ValueError(f"run {history.run_id!r} has no logged step at or past {cfg.cutoff}")
    sign = 1.0 if cfg.score_direction == "minimize_weighted_loss" else -1.0
    best = None
    for s in steps:
        score = pair_score(losses_of(history, s), cfg.preference)
        # earliest step wins ties
        if best is None or sign * score < sign * best[0]:
            best = (score, s)
    return best


def select(histories, cfg: SelectionConfig, losses_of=None) -> SelectionResult:
    """Pick one (run, step) from logged histories.

    ``losses_of(history, step_record)`` may re-evaluate the loss vector (for
    example on the full training set); it defaults to the logged minibatch
    estimate.
    """
    if not histories:
        raise ValueError("no histories to select from")
    losses_of = losses_of or (lambda h, s: s["losses"])
    ordered = sorted(histories, key=lambda h: h.run_id)
    if len({h.run_id for h in ordered}) != len(ordered):
        raise ValueError("run ids must be unique")
    cands = []
    for h in ordered:
        if h.diverged and not h.steps:
            continue
        score, s = _best_step(h, cfg, losses_of)
        L = losses_of(h, s)
        cands.append({"run_id": h.run_id, "step": s["step"], "score": score,
                      "val_acc": float(s["val_acc"]),
                      "satisfaction": pareto_satisfaction(L, cfg.preference)})
    if not cands:
        raise ValueError("every run diverged before logging a step")
    accs = np.array([c["val_acc"] for c in cands])
    bar = (accs.max() - accs.min()) * cfg.percentile + accs.min()
    survivors = [c for c in cands if c["val_acc"] >= bar]
    fallback = not survivors
    if fallback:
        # NaN accuracies leave no survivors; rank them last, ties to the smallest id
        pick = min(cands, key=lambda c: (-np.nan_to_num(c["val_acc"], nan=-np.inf), c["run_id"]))
    else:
        sign = 1.0 if cfg.score_direction == "minimize_weighted_loss" else -1.0
        pick = min(survivors, key=lambda c: (sign * c["score"], c["run_id"]))
    for c in cands:
        c["survived"] = bool(c["val_acc"] >= bar)
    return SelectionResult(pick["run_id"], pick["step"], pick["score"], pick["val_acc"],
                           pick["satisfaction"], fallback, cands)

