"""Command-line entry point: ``pareto-ood <command> --config cfg.json --out dir``.

Commands and their JSON config keys (all optional unless noted):

twobit-front   preset | alpha + betas, loss_kind, grid, limit, scans (list of objective lists)
twobit-solve   preset | alpha + betas, loss_kinds, grid, limit
train          train (TrainConfig fields), env (env spec, required), run_id
sweep          base (TrainConfig fields), axes (field -> list), env (required), seeds
select         histories (directory, required), preference, cutoff, percentile, score_direction
sine-demo      sampling, n_per_env, seeds, pair, irm_lambdas, vrex_lambdas
gradcheck      layer_dims, activation, loss_kind, n, step

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or config (the
message names the offending key).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .data import SineRegSpec, sample_sine_envs
from .nn import DenseNet, GradRequest, GradScope, finite_difference_grad, loss_and_grad, \
    max_relative_error
from .objectives import assemble
from .selection import SelectionConfig, select
from .svg import Plot
from .trainer import TrainConfig, train
from .twobit import PRESETS, TwoBitEnvSet, f_irm, find_point, pareto_scan, \
    solve_invariant_sets, write_front_csv

log = logging.getLogger("pareto_ood")

COMMANDS = ("twobit-front", "twobit-solve", "train", "sweep", "select", "sine-demo", "gradcheck")
DEFAULT_SCANS = (("L_e1", "L_e2"), ("L_erm", "L_irm"), ("L_erm", "L_irm", "L_vrex"))


class ConfigError(Exception):
    def __init__(self, key, message):
        super().__init__(f"config error at '{key}': {message}")
        self.key = key


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(key, "required key is missing")
    return cfg[key]


def _only(cfg, allowed):
    for k in cfg:
        if k not in allowed:
            raise ConfigError(k, "unknown key")


def _envset(cfg):
    if "preset" in cfg:
        if cfg["preset"] not in PRESETS:
            raise ConfigError("preset", f"unknown preset {cfg['preset']!r}")
        return PRESETS[cfg["preset"]]
    try:
        return TwoBitEnvSet(float(_require(cfg, "alpha")), tuple(_require(cfg, "betas")))
    except (TypeError, ValueError) as exc:
        raise ConfigError("betas", str(exc)) from exc


def _train_config(d, key):
    try:
        return TrainConfig.from_dict(d)
    except KeyError as exc:
        bad = sorted(set(d) - set(TrainConfig.__dataclass_fields__))
        raise ConfigError(f"{key}.{bad[0]}" if bad else key, str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from exc


class Output:
    """Tracks written files so the manifest only lists files that exist."""

    def __init__(self, root: Path):
        self.root = root
        self.files = []

    def path(self, name):
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------

def cmd_twobit_front(cfg, out, seed):
    _only(cfg, {"preset", "alpha", "betas", "loss_kind", "grid", "limit", "scans"})
    envset = _envset(cfg)
    kind = cfg.get("loss_kind", "mse")
    scans = [tuple(s) for s in cfg.get("scans", DEFAULT_SCANS)]
    target = f_irm(envset.alpha, kind)
    summary = {"f_irm": [target.a, target.b], "scans": []}
    for s in scans:
        pts = pareto_scan(envset, kind, int(cfg.get("grid", 121)), float(cfg.get("limit", 3.0)),
                          s, extra_points=[(target.a, target.b)])
        name = "front_" + "_".join(o[2:] for o in s)
        write_front_csv(out.path(name + ".csv"), pts, envset.n_envs)
        fp = find_point(pts, target)
        summary["scans"].append({"objectives": list(s), "f_irm_dominated": fp.dominated,
                                 "n_points": len(pts),
                                 "n_nondominated": sum(not p.dominated for p in pts)})
        if len(s) >= 2:
            nd = [p for p in pts if not p.dominated]
            x = [p.losses[s[0]] for p in pts]
            y = [p.losses[s[1]] for p in pts]
            plot = Plot(title=f"{s[0]} vs {s[1]}", xlabel=s[0], ylabel=s[1])
            keep = np.array(x) <= np.quantile(x, 0.5)
            plot.scatter(np.array(x)[keep], np.array(y)[keep], "predictors", "#bbbbbb", 1.2)
            plot.scatter([p.losses[s[0]] for p in nd], [p.losses[s[1]] for p in nd],
                         "non-dominated", "#1f77b4", 2.0)
            plot.scatter([fp.losses[s[0]]], [fp.losses[s[1]]],
                         "f_IRM (dominated)" if fp.dominated else "f_IRM", "#d62728", 4.0,
                         marker="cross")
            plot.write(out.path(name + ".svg"))
        log.info("scan %s: f_IRM dominated=%s", s, fp.dominated)
    out.json("summary.json", summary)
    print(json.dumps(summary["scans"], sort_keys=True))


def cmd_twobit_solve(cfg, out, seed):
    _only(cfg, {"preset", "alpha", "betas", "loss_kinds", "grid", "limit"})
    envset = _envset(cfg)
    report = {}
    for kind in cfg.get("loss_kinds", ["mse", "logistic"]):
        sets = solve_invariant_sets(envset, kind, int(cfg.get("grid", 601)),
                                    float(cfg.get("limit", 3.0)))
        report[kind] = {k: np.asarray(v).tolist() for k, v in sets.items()}
        with open(out.path(f"roots_{kind}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set", "a", "b"])
            for name in ("I_S", "intersection"):
                for a, b in sets[name]:
                    w.writerow([name, repr(float(a)), repr(float(b))])
        curve = np.asarray(sets["I_X"])
        plot = Plot(title=f"invariant sets ({kind})", xlabel="a = f(1,1)", ylabel="b = f(1,-1)")
        if curve.size:
            plot.scatter(curve[:, 0], curve[:, 1], "I_X", "#bbbbbb", 1.2)
        s = np.asarray(sets["I_S"]).reshape(-1, 2)
        plot.scatter(s[:, 0], s[:, 1], "I_S", "#1f77b4", 3.0)
        x = np.asarray(sets["intersection"]).reshape(-1, 2)
        plot.scatter(x[:, 0], x[:, 1], "intersection", "#d62728", 4.0, marker="cross")
        plot.write(out.path(f"roots_{kind}.svg"))
        print(f"{kind}: intersection roots {np.round(x, 8).tolist()}")
    out.json("roots.json", report)


def _loss_plot(hist):
    steps = [s["step"] for s in hist.steps]
    plot = Plot(title=f"{hist.run_id} losses (log10)", xlabel="step", ylabel="log10 loss")
    names = hist.config.get("objectives", ["erm", "irm", "vrex"])
    for i, name in enumerate(names):
        vals = np.array([s["losses"][i] for s in hist.steps])
        plot.line(steps, np.log10(np.maximum(vals, 1e-300)), name)
    return plot


def cmd_train(cfg, out, seed):
    _only(cfg, {"train", "env", "run_id"})
    tcfg = dict(cfg.get("train", {}))
    env = dict(_require(cfg, "env"))
    if seed is not None:
        tcfg["seed"] = seed
        env["seed"] = seed
    config = _train_config(tcfg, "train")
    try:
        tr, va, te = ex.build_envs(env)
    except ex.SpecError as exc:
        raise ConfigError(f"env.{exc.key}", exc.message) from exc
    run_id = cfg.get("run_id", "run")
    _, hist = train(config, tr, va, te, env, run_id)
    hist.write(out.path(f"{run_id}.jsonl"))
    if hist.steps:
        _loss_plot(hist).write(out.path(f"{run_id}_losses.svg"))
        last = hist.steps[-1]
        print(f"{run_id}: step {last['step']} losses {last['losses']} "
              f"train_acc {last['train_acc']} test_acc {last['test_acc']}")
    if hist.diverged:
        raise RuntimeError(hist.error)


def cmd_sweep(cfg, out, seed, workers):
    _only(cfg, {"base", "axes", "env", "seeds"})
    env = dict(_require(cfg, "env"))
    base = dict(cfg.get("base", {}))
    axes = {k: list(v) for k, v in cfg.get("axes", {}).items()}
    seeds = cfg.get("seeds", [base.get("seed", 0) if seed is None else seed])
    for k in list(base) + list(axes):
        if k not in TrainConfig.__dataclass_fields__:
            raise ConfigError(k if k in base else f"axes.{k}", "unknown TrainConfig field")
    jobs = []
    for s in seeds:
        try:
            part = ex.grid_jobs({**base, "seed": s}, axes, {**env, "seed": s}, prefix=f"s{s}")
        except ex.SpecError as exc:
            raise ConfigError(exc.key, exc.message) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError("base", str(exc)) from exc
        jobs += part
    try:
        ex.build_envs({**env, "seed": seeds[0]})
    except ex.SpecError as exc:
        raise ConfigError(f"env.{exc.key}", exc.message) from exc
    hists = ex.sweep(jobs, workers=workers)
    rows = []
    for (run_id, c, _), h in zip(jobs, hists):
        h.write(out.path(f"runs/{run_id}.jsonl"))
        last = h.steps[-1] if h.steps else {}
        rows.append([run_id, json.dumps({k: c.to_dict()[k] for k in sorted(axes)}, sort_keys=True),
                     c.seed, int(h.diverged), int(h.error is not None),
                     last.get("val_acc"), last.get("test_acc")])
    with open(out.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "axes", "seed", "diverged", "failed", "val_acc", "test_acc"])
        w.writerows(rows)
    failed = sum(r[4] for r in rows)
    print(f"{len(rows)} runs, {failed} failed")


def cmd_select(cfg, out, seed):
    _only(cfg, {"histories", "preference", "cutoff", "percentile", "score_direction"})
    directory = Path(_require(cfg, "histories"))
    if not directory.is_dir():
        raise ConfigError("histories", f"{directory} is not a directory")
    kw = {k: cfg[k] for k in ("preference", "cutoff", "percentile", "score_direction") if k in cfg}
    if "preference" in kw:
        kw["preference"] = tuple(kw["preference"])
    try:
        scfg = SelectionConfig(**kw)
    except ValueError as exc:
        raise ConfigError(next(iter(kw), "selection"), str(exc)) from exc
    hists = ex.load_histories(directory)
    if not hists:
        raise RuntimeError(f"no *.jsonl histories in {directory}")
    res = select(hists, scfg)
    res.write(out.path("selection.json"))
    print(f"chosen {res.chosen_run} step {res.chosen_step} score {res.score:.6g} "
          f"val_acc {res.val_acc:.4f} fallback {res.fallback}")


def cmd_sine_demo(cfg, out, seed):
    _only(cfg, {"sampling", "n_per_env", "seeds", "pair", "irm_lambdas", "vrex_lambdas"})
    seeds = cfg.get("seeds", [0] if seed is None else [seed])
    spec = {"sampling": cfg.get("sampling", "gaussian"), "n_per_env": cfg.get("n_per_env", 2500)}
    pair = {**ex.SINE_PAIR, **cfg.get("pair", {})}
    rows = []
    for s in seeds:
        res = ex.sine_comparison({**spec, "seed": s}, pair, cfg.get("irm_lambdas"),
                                 cfg.get("vrex_lambdas"), seed=s)
        for name, v in res["violations"].items():
            rows.append([s, name, repr(float(v))])
        if s == seeds[0]:
            envs = sample_sine_envs(SineRegSpec(**{**spec, "seed": s}))
            plot = Plot(title="predictions along x1 (x2 = 0)", xlabel="x1", ylabel="f(x1, 0)")
            xs = np.linspace(-4, 4, 161)
            plot.line(xs, np.sin(xs) + 1, "sin(x1)+1", "#000000")
            for name in ("pair", "irm_best", "vrex_best"):
                net = res["nets"][name]
                plot.line(xs, net.predict_scalar(np.column_stack([xs, np.zeros_like(xs)])), name)
            for e in envs:
                plot.scatter(e.inputs[::25, 0], e.targets[::25], f"env {e.env_id}", radius=1.2)
            plot.write(out.path("sine_predictions.svg"))
    with open(out.path("sine_violations.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "method", "invariance_violation"])
        w.writerows(rows)
    for r in rows:
        print(*r)


def cmd_gradcheck(cfg, out, seed):
    _only(cfg, {"layer_dims", "activation", "loss_kind", "n", "step"})
    dims = cfg.get("layer_dims", [3, 5, 4, 1])
    kind = cfg.get("loss_kind", "mse")
    seed = 0 if seed is None else seed
    rng = np.random.default_rng(seed)
    n = int(cfg.get("n", 16))
    X = rng.normal(size=(n, dims[0]))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    worst = {}
    for act in ([cfg["activation"]] if "activation" in cfg else ["identity", "tanh", "relu"]):
        net = DenseNet(dims, act).init_params(seed)
        _, g = loss_and_grad(net, X, y, GradRequest(GradScope.FULL, kind))

        def f(p, net=net):
            q = net.copy()
            q.params[:] = p
            return loss_and_grad(q, X, y, GradRequest(GradScope.FULL, kind))[0]
        worst[f"net_{act}"] = max_relative_error(g, finite_difference_grad(f, net.params,
                                                                           cfg.get("step", 1e-5)))
    from .objectives import EnvBatch
    envs = [EnvBatch(e, X[e::2], y[e::2]) for e in range(2)]
    net = DenseNet(dims, "tanh").init_params(seed)
    _, G = assemble(envs, net, loss_kind=kind)
    for i, name in enumerate(("erm", "irm", "vrex")):
        def f(p, i=i):
            q = net.copy()
            q.params[:] = p
            return assemble(envs, q, loss_kind=kind)[0][i]
        worst[f"penalty_{name}"] = max_relative_error(G[i], finite_difference_grad(
            f, net.params, cfg.get("step", 1e-5)))
    out.json("gradcheck.json", worst)
    for k, v in worst.items():
        print(f"{k}: max relative error {v:.3e}")
    if max(worst.values()) >= 1e-5:
        raise RuntimeError("gradient check failed")


# -- driver ---------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="pareto-ood", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="overrides the seed in the config")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--workers", type=int, default=None, help="parallel workers for sweep")
    return p


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def run(argv=None):
    logging.basicConfig(level=os.environ.get("PARETO_OOD_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
        except json.JSONDecodeError as exc:
            print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
            return 2
        if not isinstance(cfg, dict):
            print("error: config must be a JSON object", file=sys.stderr)
            return 2
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    root = Path(args.out)
    if (root / "manifest.json").exists() and not args.force:
        print(f"error: {root} already holds outputs; pass --force to overwrite", file=sys.stderr)
        return 2
    root.mkdir(parents=True, exist_ok=True)
    out = Output(root)
    handler = {
        "twobit-front": cmd_twobit_front, "twobit-solve": cmd_twobit_solve,
        "train": cmd_train, "select": cmd_select, "sine-demo": cmd_sine_demo,
        "gradcheck": cmd_gradcheck,
    }
    try:
        if args.command == "sweep":
            cmd_sweep(cfg, out, args.seed, args.workers)
        else:
            handler[args.command](cfg, out, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 1
    else:
        code = 0
    files = sorted(set(f for f in out.files if (root / f).exists()))
    manifest = {"command": args.command, "config_hash": config_hash(cfg), "seed": args.seed,
                "exit_code": code, "files": files}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
