import csv
import json

import pytest

from pareto_ood.cli import run


def _cfg(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def _manifest(out):
    m = json.loads((out / "manifest.json").read_text())
    for f in m["files"]:
        assert (out / f).exists()
    return m


def test_gradcheck(tmp_path, capsys):
    assert run(["gradcheck", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "gradcheck.json").read_text())
    assert "max relative error" in capsys.readouterr().out
    assert max(v for v in report.values() if isinstance(v, float)) < 1e-5
    assert _manifest(tmp_path / "o")["files"] == ["gradcheck.json"]


def test_twobit_solve(tmp_path):
    out = tmp_path / "o"
    assert run(["twobit-solve", "--config", _cfg(tmp_path, {"preset": "fig1a"}), "--out", str(out)]) == 0
    roots = json.loads((out / "roots.json").read_text())
    assert len(roots["mse"]["intersection"]) == 2
    assert _manifest(out)["exit_code"] == 0


def test_twobit_front_marks_f_irm(tmp_path):
    out = tmp_path / "o"
    cfg = _cfg(tmp_path, {"preset": "fig1a", "grid": 61})
    assert run(["twobit-front", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [s["f_irm_dominated"] for s in summary["scans"]] == [True, True, False]
    assert "f_IRM (dominated)" in (out / "front_e1_e2.svg").read_text()
    with open(out / "front_e1_e2.csv") as fh:
        rows = list(csv.DictReader(fh))
    hit = [r for r in rows if abs(float(r["a"]) - 0.8) < 1e-9 and abs(float(r["b"]) - 0.8) < 1e-9]
    assert hit and hit[0]["dominated"] == "1"


def test_refuses_overwrite_without_force(tmp_path):
    out = str(tmp_path / "o")
    assert run(["gradcheck", "--out", out]) == 0
    assert run(["gradcheck", "--out", out]) == 2
    assert run(["gradcheck", "--out", out, "--force"]) == 0


@pytest.mark.parametrize("cfg,key", [
    ({"train": {"bogus": 1}, "env": {"kind": "twobit", "preset": "fig1a"}}, "train.bogus"),
    ({"train": {}}, "env"),
    ({"train": {}, "env": {"kind": "moons"}}, "env.kind"),
    ({"train": {}, "env": {"kind": "twobit", "preset": "fig1a", "colour": 1}}, "env.colour"),
    ({"train": {"lr_balance": -1}, "env": {"kind": "twobit", "preset": "fig1a"}}, "train"),
])
def test_config_errors_exit_2_and_name_key(tmp_path, capsys, cfg, key):
    assert run(["train", "--config", _cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert f"'{key}'" in capsys.readouterr().err


def test_bad_json_and_command(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert run(["frobnicate"]) == 2
    assert run(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_runtime_failure_exits_1(tmp_path):
    cfg = _cfg(tmp_path, {"train": {"method": "linear", "lambda_irm": 1e8, "pretrain_epochs": 0,
                                    "balance_epochs": 200, "lr_descent": 10.0,
                                    "optimizer_descent": "sgd", "loss_kind": "mse"},
                          "env": {"kind": "twobit", "preset": "cmnist", "n": 200}})
    out = tmp_path / "o"
    assert run(["train", "--config", cfg, "--out", str(out)]) == 1
    assert _manifest(out)["exit_code"] == 1


def test_train_sweep_select_reproducible(tmp_path):
    env = {"kind": "twobit", "preset": "cmnist", "n": 300}
    base = {"pretrain_epochs": 10, "balance_epochs": 10, "log_interval": 5, "hidden": [4]}
    tcfg = _cfg(tmp_path, {"train": base, "env": env}, "t.json")
    for d in ("t1", "t2"):
        assert run(["train", "--config", tcfg, "--out", str(tmp_path / d), "--seed", "4"]) == 0
    assert (tmp_path / "t1" / "run.jsonl").read_bytes() == (tmp_path / "t2" / "run.jsonl").read_bytes()
    assert (tmp_path / "t1" / "run_losses.svg").read_bytes() == \
        (tmp_path / "t2" / "run_losses.svg").read_bytes()
    assert _manifest(tmp_path / "t1")["seed"] == 4

    scfg = _cfg(tmp_path, {"base": base, "axes": {"lr_balance": [0.01, 0.1]}, "env": env,
                           "seeds": [0, 1]}, "s.json")
    assert run(["sweep", "--config", scfg, "--out", str(tmp_path / "s"), "--workers", "2"]) == 0
    runs = sorted(p.name for p in (tmp_path / "s" / "runs").iterdir())
    assert runs == ["s0_0000.jsonl", "s0_0001.jsonl", "s1_0000.jsonl", "s1_0001.jsonl"]

    sel = _cfg(tmp_path, {"histories": str(tmp_path / "s" / "runs"), "cutoff": 5}, "sel.json")
    assert run(["select", "--config", sel, "--out", str(tmp_path / "a")]) == 0
    assert run(["select", "--config", sel, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "selection.json").read_bytes() == \
        (tmp_path / "b" / "selection.json").read_bytes()
    m1, m2 = _manifest(tmp_path / "a"), _manifest(tmp_path / "b")
    assert m1 == m2


def test_select_missing_directory(tmp_path, capsys):
    cfg = _cfg(tmp_path, {"histories": str(tmp_path / "nowhere")})
    assert run(["select", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "'histories'" in capsys.readouterr().err


def test_sine_demo_small(tmp_path):
    cfg = _cfg(tmp_path, {"pair": {"pretrain_epochs": 30, "balance_epochs": 10},
                          "irm_lambdas": [1.0], "vrex_lambdas": [1.0], "n_per_env": 100})
    out = tmp_path / "o"
    assert run(["sine-demo", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "sine_violations.csv")))
    assert {r["method"] for r in rows} >= {"pair", "irm_best", "vrex_best"}
    assert "sine_predictions.svg" in _manifest(out)["files"]


def test_log_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("PARETO_OOD_LOG", "debug")
    assert run(["gradcheck", "--out", str(tmp_path / "o")]) == 0
