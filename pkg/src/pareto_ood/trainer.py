"""Two-phase training: ERM "descent" followed by a preference-aware "balance".

Baselines share the same loop: ``erm`` keeps minimizing the ERM loss and
``linear`` minimizes a fixed weighted sum of ERM, IRMv1 and V-REx after the
pretraining phase. One epoch is one optimization step in which every training
environment contributes one batch (the whole environment when ``batch_size``
is None).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import make_rng
from .epo import DEFAULT_PREFERENCE, EpoState, check_preference, solve_weights
from .nn import DenseNet, GradScope, pointwise_loss
from .objectives import IRMX, EnvBatch, EstimatorConfig, assemble

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("erm", "linear", "pair")


@dataclass
class TrainConfig:
    method: str = "pair"
    pretrain_epochs: int = 100
    balance_epochs: int = 400
    lr_descent: float = 1e-2
    lr_balance: float = 0.1
    batch_size: int | None = None
    grad_scope: str = "full"
    preference: tuple = DEFAULT_PREFERENCE
    lambda_irm: float = 0.0
    lambda_vrex: float = 0.0
    seed: int = 0
    optimizer_descent: str = "adam"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    momentum_balance: float = 0.9
    loss_kind: str = "logistic"
    hidden: tuple = (16,)
    activation: str = "tanh"
    bias: bool = True
    estimator_mode: str = "population_style_biased"
    neg_fix: str = "scale_negatives"
    neg_fix_C: float = 1.0
    mu_tolerance: float = 1e-3
    log_interval: int = 100
    divergence_threshold: float = 1e6
    objectives: tuple = IRMX

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pretrain_epochs < 0 or self.balance_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not (self.lr_descent > 0 and self.lr_balance > 0):
            raise ValueError("learning rates must be positive")
        if self.optimizer_descent not in ("sgd", "adam"):
            raise ValueError("optimizer_descent must be 'sgd' or 'adam'")
        self.grad_scope = GradScope(self.grad_scope).value
        self.preference = tuple(float(p) for p in self.preference)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.adam_betas = tuple(self.adam_betas)
        self.objectives = tuple(self.objectives)
        check_preference(self.preference, len(self.objectives))
        self.estimator()

    def estimator(self):
        return EstimatorConfig(self.estimator_mode, self.neg_fix, self.neg_fix_C)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunHistory:
    config: dict
    env_spec: dict = field(default_factory=dict)
    run_id: str = "run"
    steps: list = field(default_factory=list)
    diverged: bool = False
    error: str | None = None

    def append(self, record):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValueError("history steps must be strictly increasing")
        if self.steps and len(record["losses"]) != len(self.steps[-1]["losses"]):
            raise ValueError("loss vector length changed within a run")
        self.steps.append(record)

    def head(self):
        return {"schema_version": SCHEMA_VERSION, "type": "config", "run_id": self.run_id,
                "config": self.config, "env_spec": self.env_spec,
                "diverged": self.diverged, "error": self.error}

    def to_jsonl(self):
        lines = [json.dumps(self.head(), sort_keys=True)]
        lines += [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text):
        lines = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].get("type") != "config":
            raise ValueError("history must start with a config record")
        head = lines[0]
        if head.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {head.get('schema_version')!r}")
        h = cls(head["config"], head.get("env_spec", {}), head["run_id"],
                diverged=head.get("diverged", False), error=head.get("error"))
        for rec in lines[1:]:
            rec = dict(rec)
            rec.pop("type", None)
            h.append(rec)
        return h

    @classmethod
    def read(cls, path):
        return cls.from_jsonl(Path(path).read_text())


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.t)
        vhat = self.v / (1 - b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.buf = None

    def step(self, params, grad):
        if self.momentum:
            self.buf = grad.copy() if self.buf is None else self.momentum * self.buf + grad
            grad = self.buf
        params -= self.lr * grad


def build_net(config, n_features):
    net = DenseNet([n_features, *config.hidden, 1], config.activation, bias=config.bias)
    return net.init_params(config.seed)


def predict_labels(scores):
    """Sign with ties going to the positive class."""
    return np.where(np.asarray(scores) >= 0, 1.0, -1.0)


def evaluate(net, env, loss_kind="logistic"):
    """Accuracy (classification) or MSE (regression) and the mean loss."""
    pred = net.predict_scalar(env.inputs)
    w = env.weights if env.weights is not None else np.full(len(env), 1.0 / len(env))
    loss = float(np.dot(w, pointwise_loss(pred, env.targets, loss_kind)[0]))
    if loss_kind == "logistic":
        return {"accuracy": float(np.dot(w, predict_labels(pred) == env.targets)), "loss": loss}
    return {"mse": float(np.dot(w, (pred - env.targets) ** 2)), "loss": loss}


def _metric(net, envs, loss_kind):
    if not envs:
        return None
    key = "accuracy" if loss_kind == "logistic" else "mse"
    return float(np.mean([evaluate(net, e, loss_kind)[key] for e in envs]))


class _Batcher:
    def __init__(self, envs, batch_size, seed):
        self.envs = envs
        self.batch_size = batch_size
        self.rngs = [make_rng(seed, 1000 + e.env_id) for e in envs]

    def next(self):
        if self.batch_size is None:
            return self.envs
        out = []
        for env, rng in zip(self.envs, self.rngs):
            if env.weights is not None or len(env) <= self.batch_size:
                out.append(env)
            else:
                out.append(env.subset(rng.choice(len(env), self.batch_size, replace=False)))
        return out


def train(config: TrainConfig, envs, val_envs=None, test_envs=None, env_spec=None, run_id="run",
          net=None):
    """Run the descent phase then the balance phase; returns ``(net, history)``."""
    if not envs:
        raise ValueError("need training environments")
    if config.method != "erm" and len(envs) < 2:
        raise ValueError("penalized methods need >= 2 training environments")
    net = net if net is not None else build_net(config, envs[0].inputs.shape[1])
    history = RunHistory(config.to_dict(), env_spec or {}, run_id)
    batcher = _Batcher(envs, config.batch_size, config.seed)
    est = config.estimator()
    pref = np.asarray(config.preference)
    clf = net.classifier_slice()
    scope = GradScope(config.grad_scope)
    total = config.pretrain_epochs + config.balance_epochs

    def descent_optimizer():
        if config.optimizer_descent == "adam":
            return Adam(config.lr_descent, config.adam_betas, config.adam_eps)
        return SGD(config.lr_descent)

    def record(step, phase, losses, sol=None):
        rec = {
            "step": step,
            "phase": phase,
            "losses": [float(v) for v in losses],
            "train_acc": _metric(net, envs, config.loss_kind),
            "val_acc": _metric(net, val_envs or envs, config.loss_kind),
            "test_acc": _metric(net, test_envs, config.loss_kind),
            "env_metrics": [_metric(net, [e], config.loss_kind) for e in envs],
            "beta": None if sol is None else [float(b) for b in sol.beta],
            "mu": None if sol is None else float(sol.mu),
            "mode": None if sol is None else sol.mode.value,
        }
        history.append(rec)

    opt = descent_optimizer()
    for step in range(1, total + 1):
        phase = "descent" if step <= config.pretrain_epochs else "balance"
        if step == config.pretrain_epochs + 1:
            # parameters carry over, optimizer state does not
            opt = SGD(config.lr_balance, config.momentum_balance) if config.method == "pair" \
                else descent_optimizer()
        batches = batcher.next()
        sol = None
        try:
            L, G = assemble(batches, net, est, GradScope.FULL, config.loss_kind, config.objectives)
        except FloatingPointError as exc:
            history.diverged, history.error = True, str(exc)
            break
        if not np.all(np.isfinite(L)) or np.max(L) > config.divergence_threshold \
                or not np.all(np.isfinite(G)):
            history.diverged = True
            history.error = f"divergence at step {step}: losses {L.tolist()}"
            log.warning("%s: %s", run_id, history.error)
            break
        idx = {name: i for i, name in enumerate(config.objectives)}
        if phase == "descent" or config.method == "erm":
            direction = G[idx["erm"]]
        elif config.method == "linear":
            weights = np.zeros(len(L))
            weights[idx["erm"]] = 1.0
            if "irm" in idx:
                weights[idx["irm"]] = config.lambda_irm
            if "vrex" in idx:
                weights[idx["vrex"]] = config.lambda_vrex
            direction = G.T @ weights
        else:
            lp_cols = None if scope is GradScope.FULL else clf
            state = EpoState(L, G, pref, config.mu_tolerance, lp_columns=lp_cols)
            sol = solve_weights(state)
            direction = G.T @ sol.beta
            if scope is GradScope.FEATURIZER_FROZEN:
                direction[:clf.start] = 0.0
        opt.step(net.params, direction)
        if step % config.log_interval == 0 or step == total:
            record(step, phase, L, sol)
    return net, history


def final_losses(net, envs, config):
    """Loss vector on the full training environments."""
    L, _ = assemble(envs, net, config.estimator(), GradScope.FULL, config.loss_kind,
                    config.objectives)
    return L


def invariance_violation(net, sine_envs=None, overlap=(-2.0, 2.0), x2_range=(-4.0, 4.0),
                         n_x1=41, n_x2=81):
    """Mean over x1 in ``overlap`` of the variance of f(x1, .) across an x2 sweep."""
    x1 = np.linspace(*overlap, n_x1)
    x2 = np.linspace(*x2_range, n_x2)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    f = net.predict_scalar(np.column_stack([X1.ravel(), X2.ravel()])).reshape(n_x1, n_x2)
    return float(np.mean(f.var(axis=1)))


__all__ = ["TrainConfig", "RunHistory", "train", "evaluate", "invariance_violation",
           "predict_labels", "build_net", "final_losses", "EnvBatch"]
