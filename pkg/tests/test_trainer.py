import numpy as np
import pytest

from pareto_ood.experiments import build_envs, config_from_dict, final_test_acc, grid_jobs, sweep
from pareto_ood.nn import DenseNet
from pareto_ood.objectives import EnvBatch
from pareto_ood.trainer import (RunHistory, TrainConfig, evaluate, invariance_violation,
                                predict_labels, train)

TWOBIT_LINEAR = {"pretrain_epochs": 300, "balance_epochs": 1500, "lr_descent": 0.01,
                 "lr_balance": 0.1, "hidden": [], "bias": False, "activation": "identity",
                 "loss_kind": "logistic", "log_interval": 100}


def _twobit(n=400, seed=0):
    return build_envs({"kind": "twobit", "preset": "cmnist", "n": n, "seed": seed})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="irm")
    with pytest.raises(ValueError):
        TrainConfig(pretrain_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_balance=0)
    with pytest.raises(ValueError):
        TrainConfig(preference=(1, 1))
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"lr": 1})


def test_zero_epochs_returns_initial_net():
    tr, _, _ = _twobit()
    cfg = TrainConfig(pretrain_epochs=0, balance_epochs=0)
    net, hist = train(cfg, tr)
    ref = DenseNet([2, 16, 1], "tanh").init_params(cfg.seed)
    np.testing.assert_array_equal(net.params, ref.params)
    assert hist.steps == [] and not hist.diverged


def test_erm_collapses_and_pair_recovers_on_twobit():
    spec = {"kind": "twobit", "preset": "cmnist", "analytic": True}
    tr, va, te = build_envs(spec)
    erm, pair = [], []
    for s in range(5):
        for method, out in (("erm", erm), ("pair", pair)):
            _, h = train(config_from_dict({**TWOBIT_LINEAR, "method": method, "seed": s}),
                         tr, va, te)
            out.append(final_test_acc(h))
    assert np.median(erm) < 0.30
    assert np.median(pair) >= 0.65


def test_linear_without_penalties_matches_erm():
    tr, va, te = _twobit()
    base = {"pretrain_epochs": 20, "balance_epochs": 30, "log_interval": 5, "seed": 3}
    n1, h1 = train(config_from_dict({**base, "method": "erm"}), tr, va, te)
    n2, h2 = train(config_from_dict({**base, "method": "linear"}), tr, va, te)
    np.testing.assert_array_equal(n1.params, n2.params)
    for a, b in zip(h1.steps, h2.steps):
        assert a["losses"] == b["losses"] and a["val_acc"] == b["val_acc"]


def test_phase_boundary_keeps_parameters():
    tr, _, _ = _twobit()
    pre, _ = train(config_from_dict({"method": "pair", "pretrain_epochs": 40, "balance_epochs": 0}),
                   tr)
    # a vanishing balance rate makes any change come from the boundary itself
    both, _ = train(config_from_dict({"method": "pair", "pretrain_epochs": 40, "balance_epochs": 3,
                                      "lr_balance": 1e-300}), tr)
    np.testing.assert_array_equal(pre.params, both.params)


def test_pair_history_invariants():
    tr, _, _ = build_envs({"kind": "twobit", "preset": "cmnist", "analytic": True})
    cfg = config_from_dict({**TWOBIT_LINEAR, "method": "pair", "balance_epochs": 3000,
                            "log_interval": 10})
    _, hist = train(cfg, tr)
    balance = [s for s in hist.steps if s["phase"] == "balance"]
    assert balance
    for s in balance:
        b = np.array(s["beta"])
        assert abs(b.sum() - 1) < 1e-9 and b.min() >= -1e-12
        assert len(s["losses"]) == 3
    mu = np.array([s["mu"] for s in balance])
    medians = [np.median(mu[i:i + 50]) for i in range(0, len(mu) - 49, 50)]  # 500-step windows
    assert all(b <= a + 1e-12 for a, b in zip(medians, medians[1:]))


def test_divergence_is_flagged_not_raised():
    tr, _, _ = _twobit()
    cfg = config_from_dict({"method": "linear", "lambda_irm": 1e8, "pretrain_epochs": 0,
                            "balance_epochs": 200, "lr_descent": 10.0,
                            "optimizer_descent": "sgd", "loss_kind": "mse"})
    _, hist = train(cfg, tr)
    assert hist.diverged and "divergence" in hist.error


def test_minibatches_are_seeded():
    tr, _, _ = _twobit(n=500)
    cfg = config_from_dict({"batch_size": 64, "pretrain_epochs": 10, "balance_epochs": 10,
                            "log_interval": 5})
    a, _ = train(cfg, tr)
    b, _ = train(cfg, tr)
    np.testing.assert_array_equal(a.params, b.params)


def test_penalized_methods_need_two_envs():
    tr, _, _ = _twobit()
    with pytest.raises(ValueError):
        train(TrainConfig(), tr[:1])


def test_evaluate_examples():
    X = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 5.0]])
    env = EnvBatch(0, X, np.sign(X[:, 0]))
    oracle = DenseNet([2, 1], params=np.array([1.0, 0.0, 0.0]))
    assert evaluate(oracle, env)["accuracy"] == 1.0
    zero = DenseNet([2, 1])
    assert evaluate(zero, env)["accuracy"] == pytest.approx(2 / 3)  # ties go to +1
    np.testing.assert_array_equal(predict_labels([0.0, -0.0, -1e-300]), [1, 1, -1])


def test_evaluate_matches_recount():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = rng.choice([-1.0, 1.0], 50)
    net = DenseNet([3, 4, 1]).init_params(0)
    scores = net.forward(X)[:, 0]
    hits = sum(1 for s, t in zip(scores, y) if (1.0 if s >= 0 else -1.0) == t)
    assert evaluate(net, EnvBatch(0, X, y))["accuracy"] == pytest.approx(hits / 50)
    reg = evaluate(net, EnvBatch(0, X, y), "mse")
    assert reg["mse"] == pytest.approx(np.mean((scores - y) ** 2))


def test_invariance_violation_examples():
    ignore_x2 = DenseNet([2, 1], params=np.array([1.0, 0.0, 0.3]))
    assert invariance_violation(ignore_x2) == pytest.approx(0.0, abs=1e-24)
    only_x2 = DenseNet([2, 1], params=np.array([0.0, 1.0, 0.0]))
    assert invariance_violation(only_x2) == pytest.approx(np.var(np.linspace(-4, 4, 81)))


def test_history_roundtrip(tmp_path):
    tr, va, te = _twobit()
    _, hist = train(config_from_dict({"pretrain_epochs": 5, "balance_epochs": 5, "log_interval": 2}),
                    tr, va, te, {"kind": "twobit"}, "r1")
    hist.write(tmp_path / "r1.jsonl")
    back = RunHistory.read(tmp_path / "r1.jsonl")
    assert back.to_jsonl() == hist.to_jsonl()
    assert [s["step"] for s in back.steps] == [2, 4, 6, 8, 10]


def test_history_rejects_bad_records():
    h = RunHistory({})
    h.append({"step": 1, "losses": [1, 2]})
    with pytest.raises(ValueError):
        h.append({"step": 1, "losses": [1, 2]})
    with pytest.raises(ValueError):
        h.append({"step": 2, "losses": [1]})
    with pytest.raises(ValueError):
        RunHistory.from_jsonl('{"type": "config", "schema_version": 99, "run_id": "x", "config": {}}')


def test_sweep_single_point_equals_train(tmp_path):
    spec = {"kind": "twobit", "preset": "cmnist", "n": 300}
    jobs = grid_jobs({"pretrain_epochs": 5, "balance_epochs": 5, "log_interval": 5}, {}, spec)
    (h,) = sweep(jobs, tmp_path, workers=1)
    tr, va, te = build_envs(spec)
    _, ref = train(jobs[0][1], tr, va, te, spec, jobs[0][0])
    assert h.to_jsonl() == ref.to_jsonl()


def test_sweep_deterministic_and_ordered(tmp_path):
    spec = {"kind": "twobit", "preset": "cmnist", "n": 300}
    jobs = grid_jobs({"pretrain_epochs": 5, "balance_epochs": 5, "log_interval": 5},
                     {"lr_balance": [0.01, 0.1], "seed": [0, 1]}, spec)
    serial = sweep(jobs, tmp_path / "a", workers=1)
    parallel = sweep(jobs, tmp_path / "b", workers=2)
    assert [h.run_id for h in parallel] == [j[0] for j in jobs]
    for h in serial:
        assert (tmp_path / "a" / f"{h.run_id}.jsonl").read_bytes() == \
            (tmp_path / "b" / f"{h.run_id}.jsonl").read_bytes()


def test_sweep_records_failures():
    bad = {"kind": "twobit", "preset": "cmnist", "n": 300, "test_beta": 2.0}
    ok = {"kind": "twobit", "preset": "cmnist", "n": 300}
    cfg = config_from_dict({"pretrain_epochs": 2, "balance_epochs": 2})
    out = sweep([("bad", cfg, bad), ("ok", cfg, ok)], workers=1)
    assert out[0].error and not out[1].error
    with pytest.raises(ValueError):
        sweep([("x", cfg, ok), ("x", cfg, ok)])
