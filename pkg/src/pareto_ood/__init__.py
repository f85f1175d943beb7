"""Preference-aware multi-objective training for out-of-distribution generalization.

Core pieces: a dense network with hand-written gradients (``nn``), ERM /
IRMv1 / V-REx objectives (``objectives``), the descent/balance weight solver
(``epo``, ``simplex``), the analytic two-bit laboratory (``twobit``), data
generators (``data``), the two-phase trainer (``trainer``), checkpoint
selection (``selection``) and scikit-learn style estimators (``estimators``).
"""
from .epo import DEFAULT_PREFERENCE, EpoState, LpSolution, Mode, anchor_direction, \
    divergence_mu, epo_step, normalize_losses, solve_weights
from .estimators import PairClassifier, PairRegressor
from .nn import DenseNet, GradRequest, GradScope, forward, loss_and_grad
from .objectives import IRMX, EnvBatch, EstimatorConfig, assemble, irmv1_penalty, vrex_penalty
from .selection import SelectionConfig, SelectionResult, constraint_set_membership, \
    pair_score, pareto_satisfaction, select
from .trainer import RunHistory, TrainConfig, evaluate, invariance_violation, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PREFERENCE", "EpoState", "LpSolution", "Mode", "anchor_direction", "divergence_mu",
    "epo_step", "normalize_losses", "solve_weights", "DenseNet", "GradRequest", "GradScope",
    "forward", "loss_and_grad", "PairClassifier", "PairRegressor", "IRMX", "EnvBatch", "EstimatorConfig", "assemble",
    "irmv1_penalty", "vrex_penalty", "SelectionConfig", "SelectionResult",
    "constraint_set_membership", "pair_score", "pareto_satisfaction", "select", "RunHistory",
    "TrainConfig", "evaluate", "invariance_violation", "train",
]
