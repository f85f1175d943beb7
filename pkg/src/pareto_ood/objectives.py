"""Per-environment risks and the IRMv1 / V-REx penalties.

Every objective is returned together with its gradient over the network's
flat parameter vector, so a list of objectives can be stacked into the loss
vector and gradient matrix used by the multi-objective step.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .nn import GradRequest, GradScope, _check_targets, _normalized_weights, pointwise_loss


@dataclass
class EnvBatch:
    """Samples from one environment.

    ``weights`` turns the batch into a weighted set of atoms; with the exact
    atom probabilities every mean below becomes a population expectation.
    """

    env_id: int
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        self.targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if self.inputs.shape[0] == 0:
            raise ValueError(f"environment {self.env_id} is empty")
        if self.inputs.shape[0] != self.targets.size:
            raise ValueError("inputs and targets disagree on the number of rows")
        if self.weights is not None:
            self.weights = _normalized_weights(self.weights, self.targets.size)

    def __len__(self):
        return self.targets.size

    def subset(self, idx):
        w = None if self.weights is None else self.weights[idx]
        return EnvBatch(self.env_id, self.inputs[idx], self.targets[idx], w)


class EstimatorMode(str, Enum):
    POPULATION_STYLE_BIASED = "population_style_biased"
    UNBIASED_SPLIT = "unbiased_split"


class NegFix(str, Enum):
    ADD_CONSTANT = "add_constant"
    SCALE_NEGATIVES = "scale_negatives"


@dataclass(frozen=True)
class EstimatorConfig:
    mode: EstimatorMode = EstimatorMode.POPULATION_STYLE_BIASED
    neg_fix: NegFix = NegFix.SCALE_NEGATIVES
    C: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", EstimatorMode(self.mode))
        object.__setattr__(self, "neg_fix", NegFix(self.neg_fix))
        if not self.C > 0:
            raise ValueError("C must be positive")


IRMX = ("erm", "irm", "vrex")


def _env_terms(batch, net, loss_kind, cache=None):
    _check_targets(batch.targets, loss_kind)
    cache = cache or net._forward_cache(batch.inputs)
    pred = cache[0][-1]
    if pred.shape[1] != 1:
        raise ValueError("penalties need a scalar network output")
    pred = pred[:, 0]
    w = _normalized_weights(batch.weights, len(batch))
    per, d1, d2 = pointwise_loss(pred, batch.targets, loss_kind)
    return cache, pred, w, per, d1, d2


def env_loss(batch, net, loss_kind="mse", with_grad=False, cache=None):
    cache, _, w, per, d1, _ = _env_terms(batch, net, loss_kind, cache)
    loss = float(np.dot(w, per))
    if not with_grad:
        return loss
    return loss, net.vjp(batch.inputs, w * d1, cache)


def erm_loss(batches, net, loss_kind="mse", with_grad=False):
    """Unweighted mean over environments of the per-environment mean loss."""
    if not batches:
        raise ValueError("need at least one environment")
    parts = [env_loss(b, net, loss_kind, with_grad=True) for b in batches]
    loss = float(np.mean([p[0] for p in parts]))
    if not with_grad:
        return loss
    return loss, np.mean([p[1] for p in parts], axis=0)


def _irm_grad_w(batch, net, loss_kind, cache=None):
    """d/dw at w=1 of the batch risk of ``w * f`` plus its parameter gradient."""
    cache, pred, w, _, d1, d2 = _env_terms(batch, net, loss_kind, cache)
    g = float(np.dot(w, d1 * pred))
    dg = net.vjp(batch.inputs, w * (d2 * pred + d1), cache)
    return g, dg


def irm_scalar_grads(batch, net, loss_kind="mse"):
    """Per-sample ``d loss(w f(x), y) / dw`` at w = 1."""
    _, pred, _, _, d1, _ = _env_terms(batch, net, loss_kind)
    return d1 * pred


def irmv1_penalty(batches, net, cfg=EstimatorConfig(), loss_kind="mse", with_grad=False,
                  caches=None):
    """Sum over environments of the squared dummy-classifier gradient.

    In ``unbiased_split`` mode each batch is halved and the two half-batch
    gradient means are multiplied, which is unbiased for the squared
    population gradient but can be negative; ``cfg.neg_fix`` then applies.
    """
    total = 0.0
    grad = np.zeros(net.n_params)
    for i, batch in enumerate(batches):
        if cfg.mode is EstimatorMode.POPULATION_STYLE_BIASED:
            g, dg = _irm_grad_w(batch, net, loss_kind, None if caches is None else caches[i])
            total += g * g
            grad += 2.0 * g * dg
            continue
        if batch.weights is not None:
            raise ValueError("unbiased_split needs unweighted samples")
        n = len(batch)
        if n < 2:
            raise ValueError(f"environment {batch.env_id}: unbiased_split needs >= 2 samples")
        half = n // 2
        ga, dga = _irm_grad_w(batch.subset(slice(0, half)), net, loss_kind)
        gb, dgb = _irm_grad_w(batch.subset(slice(half, 2 * half)), net, loss_kind)
        est = ga * gb
        dest = gb * dga + ga * dgb
        if cfg.neg_fix is NegFix.ADD_CONSTANT:
            est += cfg.C
            if est < 0:
                raise ValueError(f"environment {batch.env_id}: add_constant C={cfg.C} is too "
                                 f"small for a split estimate of {est - cfg.C:.6g}")
        elif est < 0:
            est *= -cfg.C
            dest = -cfg.C * dest
        total += est
        grad += dest
    if not with_grad:
        return total
    return total, grad


def vrex_penalty(batches, net, loss_kind="mse", with_grad=False):
    """Population variance (1/n normalization) of the per-environment risks."""
    if len(batches) < 2:
        raise ValueError("V-REx needs at least two environments")
    parts = [env_loss(b, net, loss_kind, with_grad=True) for b in batches]
    losses = np.array([p[0] for p in parts])
    centered = losses - losses.mean()
    value = float(np.mean(centered**2))
    if not with_grad:
        return value
    n = len(parts)
    grad = sum((2.0 / n) * c * p[1] for c, p in zip(centered, parts))
    return value, grad


def assemble(batches, net, cfg=EstimatorConfig(), scope=GradScope.FULL, loss_kind="mse",
             objectives=IRMX):
    """Loss vector and gradient matrix (one row per objective) over ``scope``.

    Per-environment risks and their gradients are computed once and shared by
    the ERM and V-REx rows.
    """
    for name in objectives:
        if name not in ("erm", "irm", "vrex"):
            raise ValueError(f"unknown objective {name!r}")
    if not batches:
        raise ValueError("need at least one environment")
    sl = net.scope_slice(scope)
    caches = [net._forward_cache(b.inputs) for b in batches]
    if "erm" in objectives or "vrex" in objectives:
        env_parts = [env_loss(b, net, loss_kind, True, c) for b, c in zip(batches, caches)]
        env_L = np.array([p[0] for p in env_parts])
        env_G = np.vstack([p[1] for p in env_parts])
    values, rows = [], []
    for name in objectives:
        if name == "erm":
            v, g = float(env_L.mean()), env_G.mean(axis=0)
        elif name == "irm":
            v, g = irmv1_penalty(batches, net, cfg, loss_kind, True, caches)
        else:
            if len(batches) < 2:
                raise ValueError("V-REx needs at least two environments")
            centered = env_L - env_L.mean()
            v = float(np.mean(centered**2))
            g = (2.0 / len(batches)) * centered @ env_G
        values.append(v)
        rows.append(g[sl])
    return np.array(values), np.vstack(rows)


def grad_cosine(g1, g2):
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))


__all__ = [
    "EnvBatch", "EstimatorConfig", "EstimatorMode", "NegFix", "GradRequest", "IRMX",
    "env_loss", "erm_loss", "irmv1_penalty", "irm_scalar_grads", "vrex_penalty",
    "assemble", "grad_cosine",
]
