import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pareto_ood.data import TwoBitSampleSpec, sample_twobit
from pareto_ood.twobit import (PRESETS, OddPredictor, TwoBitEnvSet, dominated_flags, dominated_mask,
                               f_irm, failure_range_check, find_point, irms_residual, is_dominated,
                               moments, pareto_scan, pop_loss, pop_loss_grad,
                               population_objectives, reweighted_stationarity, scan_table,
                               solve_invariant_sets, write_front_csv)

FIG1A = PRESETS["fig1a"]


@pytest.mark.parametrize("alpha,beta,c", [(0.1, 0.3, 0.7), (0.25, 0.9, -1.3)])
def test_moments_single_feature_predictors(alpha, beta, c):
    ef2, efy = moments(OddPredictor(c, c), alpha, beta)
    assert ef2 == pytest.approx(c * c) and efy == pytest.approx((1 - 2 * alpha) * c)
    ef2, efy = moments(OddPredictor(c, -c), alpha, beta)
    assert ef2 == pytest.approx(c * c) and efy == pytest.approx((1 - 2 * beta) * c)
    assert moments(OddPredictor(0, 0), alpha, beta) == (0, 0)


def test_pop_loss_examples():
    assert pop_loss(OddPredictor(0, 0), 0.1, 0.3) == 0.5
    assert pop_loss(OddPredictor(0, 0), 0.1, 0.3, "logistic") == pytest.approx(np.log(2))
    assert pop_loss(f_irm(0.1), 0.1, 0.4) == pytest.approx(0.18)


def test_residual_examples():
    assert irms_residual(OddPredictor(0, 0), 0.1, 0.2) == 0
    for beta in (0.05, 0.4, 0.9):
        assert irms_residual(f_irm(0.1), 0.1, beta) == pytest.approx(0, abs=1e-15)
    c = 1 - 2 * 0.3
    x2_only = OddPredictor(c, -c)
    assert irms_residual(x2_only, 0.1, 0.3) == pytest.approx(0, abs=1e-15)
    assert abs(irms_residual(x2_only, 0.1, 0.4)) > 1e-3


def test_logistic_residual_at_log_odds():
    pred = f_irm(0.1, "logistic")
    assert pred.a == pytest.approx(np.log(9))
    for beta in (0.11, 0.4):
        assert irms_residual(pred, 0.1, beta, "logistic") == pytest.approx(0, abs=1e-12)


def test_failure_band():
    assert failure_range_check(0.1) is True
    assert failure_range_check(0.25) is False
    assert failure_range_check(0.9) is True
    with pytest.raises(ValueError):
        failure_range_check(0.1, "logistic")


def test_envset_validation():
    with pytest.raises(ValueError):
        TwoBitEnvSet(0.0, (0.1,))
    with pytest.raises(ValueError):
        solve_invariant_sets(TwoBitEnvSet(0.1, (0.2, 0.2)))


def test_invariant_sets_mse():
    sets = solve_invariant_sets(FIG1A, "mse")
    inter = sets["intersection"]
    assert inter.shape == (2, 2)
    np.testing.assert_allclose(inter, [[0, 0], [0.8, 0.8]], atol=1e-6)
    assert len(sets["I_S"]) > len(inter)
    assert len(sets["I_X"]) > 0


def test_invariant_sets_logistic():
    inter = solve_invariant_sets(FIG1A, "logistic")["intersection"]
    nonzero = inter[np.linalg.norm(inter, axis=1) > 1e-6]
    assert nonzero.shape == (1, 2)
    np.testing.assert_allclose(nonzero[0], [np.log(9), np.log(9)], atol=1e-4)


@settings(max_examples=8)
@given(alpha=st.floats(0.05, 0.45), b1=st.floats(0.05, 0.95), gap=st.floats(0.1, 0.5))
def test_intersection_is_zero_and_f_irm(alpha, b1, gap):
    b2 = b1 + gap if b1 + gap < 0.95 else b1 - gap
    inter = solve_invariant_sets(TwoBitEnvSet(alpha, (b1, b2)), "mse", grid=301)
    c = 1 - 2 * alpha
    assert inter["intersection"].shape == (2, 2)
    np.testing.assert_allclose(inter["intersection"], [[0, 0], [c, c]], atol=1e-6)


def test_no_roots_gives_empty_sets():
    # a window that excludes both invariant predictors
    sets = solve_invariant_sets(FIG1A, "mse", grid=41, limit=0.3)
    assert sets["intersection"].shape[0] <= 1  # only the zero predictor can be inside
    far = solve_invariant_sets(FIG1A, "mse", grid=41, limit=3.0)
    assert far["intersection"].shape[0] == 2


@pytest.mark.parametrize("kind", ["mse", "logistic"])
def test_pop_loss_gradient(kind):
    rng = np.random.default_rng(0)
    h = 1e-6
    for a, b in rng.uniform(-2, 2, (10, 2)):
        g = pop_loss_grad((a, b), 0.2, 0.35, kind)
        fa = (pop_loss((a + h, b), 0.2, 0.35, kind) - pop_loss((a - h, b), 0.2, 0.35, kind)) / (2 * h)
        fb = (pop_loss((a, b + h), 0.2, 0.35, kind) - pop_loss((a, b - h), 0.2, 0.35, kind)) / (2 * h)
        np.testing.assert_allclose(g, [fa, fb], atol=1e-8)


def test_moments_match_monte_carlo():
    rng = np.random.default_rng(2024)
    for i in range(20):
        a, b = rng.uniform(-2, 2, 2)
        alpha, beta = rng.uniform(0.05, 0.95, 2)
        batch = sample_twobit(TwoBitSampleSpec(alpha, beta, 1_000_000, seed=i))
        pred = OddPredictor(a, b)
        f = pred(batch.inputs[:, 0], batch.inputs[:, 1])
        ef2, efy = moments(pred, alpha, beta)
        for samples, exact in ((f * f, ef2), (f * batch.targets, efy)):
            se = samples.std() / np.sqrt(samples.size)
            assert abs(samples.mean() - exact) <= 4 * se + 1e-12


def test_front_scans_fig1a():
    target = f_irm(0.1)
    for objectives, dominated in ((("L_e1", "L_e2"), True), (("L_erm", "L_irm"), True),
                                  (("L_erm", "L_irm", "L_vrex"), False)):
        pts = pareto_scan(FIG1A, "mse", grid=121, objectives=objectives)
        assert find_point(pts, target).dominated is dominated
        assert is_dominated(find_point(pts, target), pts, objectives) is dominated


def test_dominated_flags_match_brute_force():
    rng = np.random.default_rng(3)
    F = np.round(rng.uniform(0, 1, (400, 3)), 2)  # rounding creates ties
    np.testing.assert_array_equal(dominated_flags(F), dominated_mask(F))


def test_single_best_point_never_dominated():
    F = np.array([[0.0, 0.0], [1.0, 0.5], [0.5, 1.0], [0.0, 0.0]])
    flags = dominated_flags(F)
    assert not flags[0] and not flags[3] and flags[1] and flags[2]


def test_front_survives_random_spot_check():
    grid, limit = 121, 3.0
    pts = pareto_scan(FIG1A, "mse", grid=grid, limit=limit)
    front = [p for p in pts if not p.dominated]
    F = np.array([[p.losses["L_e1"], p.losses["L_e2"]] for p in front])
    # one grid cell can improve a loss by at most spacing * gradient norm
    spacing = 2 * limit / (grid - 1)
    tau = spacing * max(np.linalg.norm(pop_loss_grad((p.predictor.a, p.predictor.b), 0.1, be))
                        for p in front for be in FIG1A.betas)
    R = np.random.default_rng(7).uniform(-limit, limit, (100_000, 2))
    Rl = np.column_stack(population_objectives((R[:, 0], R[:, 1]), FIG1A)["env"])
    for t in F:
        assert not np.any(np.all(Rl < t - tau, axis=1))


def test_scan_quantization_makes_ties_exact():
    cols = scan_table(FIG1A, np.array([0.3]), np.array([0.3]))
    assert cols["L_e1"][0] == cols["L_e2"][0]


def test_reweighted_stationarity():
    lam = reweighted_stationarity(f_irm(0.1), FIG1A)
    assert lam is not None and lam.sum() == pytest.approx(1)
    assert reweighted_stationarity(OddPredictor(2.0, -1.5), FIG1A) is None
    alpha, beta = 0.1, 0.11
    a = ((1 - alpha) - beta) / ((1 - alpha) - beta * (1 - 2 * alpha))
    b = (beta - alpha) / (alpha + beta * (1 - 2 * alpha))
    np.testing.assert_allclose(reweighted_stationarity(OddPredictor(a, b), FIG1A), [1, 0],
                               atol=1e-9)


def test_write_front_csv(tmp_path):
    pts = pareto_scan(FIG1A, grid=11, include_roots=False)
    write_front_csv(tmp_path / "f.csv", pts)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "a,b,L_e1,L_e2,L_erm,L_irm,L_vrex,dominated"
    assert len(lines) == len(pts) + 1
