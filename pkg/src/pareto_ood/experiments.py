"""Environment specs, run sweeps and the comparison protocols built on them.

An environment spec is a plain JSON-able dict; ``build_envs`` turns it into
``(train, val, test)`` lists of EnvBatch. Supported kinds:

* ``twobit``: sampled two-bit environments (``alpha``, ``train_betas``,
  ``test_beta``, ``n``, ``seed``) or a ``preset`` name; ``analytic: true``
  uses exact population atoms instead of samples.
* ``colored_digits``: fields of ColoredDigitSpec plus ``train_envs`` and
  ``test_envs`` index lists.
* ``sine``: fields of SineRegSpec; there is no test split.
"""
from __future__ import annotations

import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (ColoredDigitSpec, SineRegSpec, make_colored_envs, sample_sine_envs,
                   twobit_envs)
from .trainer import RunHistory, TrainConfig, invariance_violation, train
from .twobit import PRESETS, TEST_BETA, TwoBitEnvSet, atom_batches

log = logging.getLogger(__name__)

ENV_KINDS = ("twobit", "colored_digits", "sine")


class SpecError(KeyError):
    """A config or env spec names an unknown or invalid key."""

    def __init__(self, key, message):
        super().__init__(key)
        self.key = key
        self.message = message

    def __str__(self):
        return f"{self.key}: {self.message}"


def _check_keys(spec, allowed, where):
    for k in spec:
        if k not in allowed:
            raise SpecError(k, f"unknown key in {where}")


def _twobit(spec):
    _check_keys(spec, {"kind", "preset", "alpha", "train_betas", "test_beta", "n", "seed",
                       "analytic", "val_n"}, "twobit env spec")
    if "preset" in spec:
        if spec["preset"] not in PRESETS:
            raise SpecError("preset", f"unknown preset {spec['preset']!r}")
        base = PRESETS[spec["preset"]]
        alpha, betas = base.alpha, base.betas
        test_beta = TEST_BETA[spec["preset"]]
    else:
        alpha, betas, test_beta = spec.get("alpha"), spec.get("train_betas"), None
        if alpha is None or betas is None:
            raise SpecError("alpha", "twobit spec needs 'preset' or 'alpha' and 'train_betas'")
    alpha = float(spec.get("alpha", alpha))
    betas = tuple(float(b) for b in spec.get("train_betas", betas))
    test_beta = spec.get("test_beta", test_beta)
    seed = int(spec.get("seed", 0))
    if spec.get("analytic", False):
        train = atom_batches(TwoBitEnvSet(alpha, betas))
        test = [] if test_beta is None else atom_batches(TwoBitEnvSet(alpha, (float(test_beta),)))
        for i, t in enumerate(test):
            t.env_id = len(train) + i
        return train, train, test
    n = int(spec.get("n", 5000))
    k = len(betas)
    train = twobit_envs(alpha, betas, n, seed, 0)
    val = twobit_envs(alpha, betas, int(spec.get("val_n", n // 5)), seed, k)
    test = [] if test_beta is None else twobit_envs(alpha, (float(test_beta),), n, seed, 2 * k)
    return train, val, test


def _colored(spec):
    known = {f.name for f in fields(ColoredDigitSpec)}
    _check_keys(spec, known | {"kind", "train_envs", "test_envs", "val_fraction"},
                "colored_digits env spec")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in spec.items() if k in known}
    envs = make_colored_envs(ColoredDigitSpec(**kw))
    tr = spec.get("train_envs", list(range(len(envs) - 1)))
    te = spec.get("test_envs", [len(envs) - 1])
    frac = float(spec.get("val_fraction", 0.2))
    train, val = [], []
    for i in tr:
        e = envs[i]
        cut = int(round(len(e) * (1 - frac)))
        train.append(e.subset(np.arange(cut)))
        val.append(e.subset(np.arange(cut, len(e))))
    return train, val, [envs[i] for i in te]


def _sine(spec):
    known = {f.name for f in fields(SineRegSpec)}
    _check_keys(spec, known | {"kind"}, "sine env spec")
    kw = {k: v for k, v in spec.items() if k in known}
    envs = sample_sine_envs(SineRegSpec(**kw))
    return envs, envs, []


def build_envs(spec):
    kind = spec.get("kind")
    if kind not in ENV_KINDS:
        raise SpecError("kind", f"env kind must be one of {ENV_KINDS}, got {kind!r}")
    return {"twobit": _twobit, "colored_digits": _colored, "sine": _sine}[kind](spec)


def config_from_dict(d):
    try:
        return TrainConfig.from_dict(d)
    except KeyError as exc:
        bad = sorted(set(d) - {f.name for f in fields(TrainConfig)})
        raise SpecError(bad[0] if bad else "config", str(exc)) from exc


# -- sweeps ---------------------------------------------------------------

def run_one(run_id, config: TrainConfig, env_spec):
    """Train one configuration; failures come back as a flagged history."""
    try:
        train_envs, val_envs, test_envs = build_envs(env_spec)
        _, hist = train(config, train_envs, val_envs, test_envs, env_spec, run_id)
    except Exception as exc:  # recorded, the sweep continues
        log.error("run %s failed: %s", run_id, exc)
        hist = RunHistory(config.to_dict(), env_spec, run_id,
                          error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}")
    return hist


def _run_packed(args):
    return run_one(*args)


def sweep(jobs, out_dir=None, workers=None):
    """Run ``(run_id, TrainConfig, env_spec)`` jobs, optionally in parallel.

    Results keep the job order; with ``out_dir`` each history is written to
    ``<run_id>.jsonl``.
    """
    jobs = list(jobs)
    ids = [j[0] for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("run ids must be unique")
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(jobs) <= 1:
        results = [run_one(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_packed, jobs))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for h in results:
            h.write(out / f"{h.run_id}.jsonl")
    return results


def grid_jobs(base: dict, axes: dict, env_spec, prefix="run"):
    """Cartesian product of ``axes`` over ``base``; run ids are zero-padded indices."""
    keys = sorted(axes)
    combos = [{}]
    for k in keys:
        combos = [{**c, k: v} for c in combos for v in axes[k]]
    return [(f"{prefix}_{i:04d}", config_from_dict({**base, **c}), env_spec)
            for i, c in enumerate(combos)]


def load_histories(directory):
    return [RunHistory.read(p) for p in sorted(Path(directory).glob("*.jsonl"))]


# -- protocols ------------------------------------------------------------

def final_test_acc(history):
    if history.error or history.diverged or not history.steps:
        return float("nan")
    return history.steps[-1]["test_acc"]


def sine_violation(config: TrainConfig, spec: dict):
    """Train on the sine environments and score causal invariance in the overlap."""
    envs, _, _ = build_envs({"kind": "sine", **spec})
    net, hist = train(config, envs)
    if hist.diverged:
        return float("inf"), hist
    return invariance_violation(net, envs), hist


CMNIST_BLOBS = {"kind": "colored_digits", "n_per_env": 2500}
CMNIST_PAIR = {"method": "pair", "pretrain_epochs": 100, "balance_epochs": 1500,
               "lr_descent": 0.01, "lr_balance": 0.2, "hidden": [16], "loss_kind": "logistic"}
IRM_LAMBDAS = (1e1, 1e2, 1e3, 1e4, 1e5)
IRM_PRETRAIN = (0, 50, 100, 150, 250)


def cmnist_comparison(seeds=range(10), grid_seeds=range(3), env_spec=None, pair_config=None,
                      lambdas=IRM_LAMBDAS, pretrains=IRM_PRETRAIN, workers=1):
    """ERM and PAIR test accuracies per seed, and the fixed-lambda IRMv1 grid.

    Every grid run trains for the same total number of epochs as PAIR. The
    grid is scored by median test accuracy over ``grid_seeds``.
    """
    env_spec = dict(env_spec or CMNIST_BLOBS)
    pair = dict(pair_config or CMNIST_PAIR)
    total = pair["pretrain_epochs"] + pair["balance_epochs"]
    jobs = []
    for s in seeds:
        spec = {**env_spec, "seed": s}
        jobs.append((f"pair_s{s}", config_from_dict({**pair, "seed": s}), spec))
        jobs.append((f"erm_s{s}", config_from_dict({**pair, "method": "erm", "seed": s}), spec))
    for lam in lambdas:
        for pre in pretrains:
            for s in grid_seeds:
                cfg = {**pair, "method": "linear", "lambda_irm": lam, "pretrain_epochs": pre,
                       "balance_epochs": total - pre, "seed": s}
                jobs.append((f"irm_l{lam:g}_p{pre}_s{s}", config_from_dict(cfg),
                             {**env_spec, "seed": s}))
    hist = {h.run_id: h for h in sweep(jobs, workers=workers)}
    out = {"pair": [final_test_acc(hist[f"pair_s{s}"]) for s in seeds],
           "erm": [final_test_acc(hist[f"erm_s{s}"]) for s in seeds], "irm_grid": {}}
    for lam in lambdas:
        for pre in pretrains:
            accs = [final_test_acc(hist[f"irm_l{lam:g}_p{pre}_s{s}"]) for s in grid_seeds]
            out["irm_grid"][(lam, pre)] = float(np.nanmedian(accs)) if np.any(np.isfinite(accs)) \
                else float("nan")
    return out


SINE_LAMBDAS = (1e0, 1e1, 1e2, 1e3, 1e4)
SINE_PAIR = {"method": "pair", "pretrain_epochs": 1500, "balance_epochs": 500,
             "lr_descent": 0.01, "lr_balance": 0.01, "hidden": [32], "activation": "tanh",
             "loss_kind": "mse"}


def sine_comparison(spec, pair_config, irm_lambdas=None, vrex_lambdas=None, seed=0):
    """Invariance violation of PAIR against IRMv1-only and V-REx-only grids."""
    pair = {**pair_config, "seed": seed}
    total = pair["pretrain_epochs"] + pair["balance_epochs"]
    base = {**pair, "method": "linear", "optimizer_descent": pair.get("optimizer_descent", "adam")}
    runs = {"pair": config_from_dict(pair)}
    for lam in irm_lambdas or SINE_LAMBDAS:
        runs[f"irm_{lam:g}"] = config_from_dict({**base, "lambda_irm": lam, "lambda_vrex": 0.0})
    for lam in vrex_lambdas or SINE_LAMBDAS:
        runs[f"vrex_{lam:g}"] = config_from_dict({**base, "lambda_irm": 0.0, "lambda_vrex": lam})
    assert all(c.pretrain_epochs + c.balance_epochs == total for c in runs.values())
    viol, nets = {}, {}
    envs, _, _ = build_envs({"kind": "sine", **spec})
    for name, cfg in runs.items():
        net, hist = train(cfg, envs)
        viol[name] = float("inf") if hist.diverged else invariance_violation(net, envs)
        nets[name] = net
    for fam in ("irm", "vrex"):
        best = min((k for k in viol if k.startswith(fam + "_")), key=lambda k: viol[k])
        viol[f"{fam}_best"] = viol[best]
        nets[f"{fam}_best"] = nets[best]
    return {"violations": viol, "nets": nets}
