import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vsrt.theory import (ConstructionFailed, KPatternTask, ResourceError, TheoryConfigError, TheoryGrid,
                         all_inputs, conv_bias, conv_forward, fcsa_bound, fcsa_gradient, fcsa_init_gradnorm,
                         fcsa_learn, hinge, init_pm_one_over_k, construct_readout, readout_norm_bound,
                         make_kpattern, pattern_index, stcsa_learn, sweep_and_report, gd_loss_bound, width_gate,
                         windows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# tasks


def test_k1_parity_is_the_coordinate():
    task = make_kpattern(6, 1, j_star=4)
    x = all_inputs(6)
    assert np.array_equal(task(x), x[:, 4])


def test_parity_of_window():
    task = make_kpattern(3, 3)
    assert task(np.array([1.0, -1.0, -1.0])) == 1.0
    assert task(np.array([1.0, 1.0, -1.0])) == -1.0


def test_random_table_matches_on_every_window():
    task = make_kpattern(5, 3, j_star=1, seed=9, kind="random")
    for z in all_inputs(3):
        x = np.array([1.0, *z, -1.0])
        assert task(x) == task.table[pattern_index(z)]


def test_constant_task_for_k0():
    task = make_kpattern(4, 0)
    assert np.all(task(all_inputs(4)) == 1.0)


@pytest.mark.parametrize("n,k,j", [(4, 5, 0), (4, 2, 3), (0, 0, 0), (4, -1, 0)])
def test_task_bounds(n, k, j):
    with pytest.raises(TheoryConfigError):
        make_kpattern(n, k, j)


def test_all_inputs_enumeration_and_limit():
    x = all_inputs(3)
    assert x.shape == (8, 3)
    assert len({tuple(r) for r in x}) == 8
    with pytest.raises(ResourceError):
        all_inputs(25)


# ---------------------------------------------------------------------------
# fully connected gradient norms


def test_bound_arithmetic():
    # the smaller of the two inverse binomials: C(15,4) = 1365 beats C(15,3) = 455
    assert fcsa_bound(16, 4, 32) == pytest.approx(512 / 1365)
    assert fcsa_bound(8, 2, 8) == pytest.approx(64 / 21)
    assert fcsa_bound(8, 6, 8) == pytest.approx(64 / 21)
    assert fcsa_bound(8, 0, 8) == pytest.approx(64.0)


def test_fcsa_gradient_matches_finite_differences(rng):
    task = make_kpattern(6, 2, 1)
    x = all_inputs(6)
    w = rng.normal(size=(5, 6))
    u = rng.normal(size=5) * 0.3
    _, gw, gu = fcsa_gradient(task, w, u, x)
    eps = 1e-6
    for i, j in [(0, 0), (2, 3), (4, 5)]:
        wp, wm = w.copy(), w.copy()
        wp[i, j] += eps
        wm[i, j] -= eps
        num = (fcsa_gradient(task, wp, u, x)[0] - fcsa_gradient(task, wm, u, x)[0]) / (2 * eps)
        assert gw[i, j] == pytest.approx(num, abs=1e-6)
    for i in range(5):
        up, um = u.copy(), u.copy()
        up[i] += eps
        um[i] -= eps
        num = (fcsa_gradient(task, w, up, x)[0] - fcsa_gradient(task, w, um, x)[0]) / (2 * eps)
        assert gu[i] == pytest.approx(num, abs=1e-6)


def test_saturated_hinge_has_zero_gradient():
    task = make_kpattern(5, 0)
    x = all_inputs(5)
    w = np.zeros((4, 5))
    u = np.full(4, 0.5)
    loss, gw, gu = fcsa_gradient(task, w, u, x, bias=2.0)
    assert loss == 0.0 and not gw.any() and not gu.any()


def test_exact_mean_is_below_bound():
    stats = fcsa_init_gradnorm(make_kpattern(8, 2, 3), q=8, trials=16, seed=0)
    assert stats.exact and stats.stderr == 0.0
    assert stats.mean <= stats.bound
    assert len(stats.sq_norms) == 16


def test_readout_keeps_predictions_in_unit_range():
    rng = np.random.default_rng(0)
    x = all_inputs(8)
    for _ in range(5):
        w = rng.normal(size=(16, 8)) / math.sqrt(8)
        u = rng.choice([-1.0, 1.0], size=16) / (16 * np.abs(w).sum(axis=1))
        h = np.maximum(x @ w.T, 0) @ u
        assert np.abs(u).max() <= 1 and np.abs(h).max() <= 1


def test_monte_carlo_above_exact_limit():
    stats = fcsa_init_gradnorm(make_kpattern(18, 2, 8), q=4, trials=3, seed=1)
    assert not stats.exact and stats.stderr > 0
    with pytest.raises(ResourceError):
        fcsa_init_gradnorm(make_kpattern(25, 2), q=2, trials=1, exact=True)


def test_gradnorm_medians_fall_with_k():
    medians = [fcsa_init_gradnorm(make_kpattern(16, k, (16 - k) // 2), 32, 32, seed=k).median
               for k in (2, 4, 6, 8)]
    assert all(a > b for a, b in zip(medians, medians[1:])), medians


# ---------------------------------------------------------------------------
# convolutional learner


def naive_stcsa_learn(task, q, eta, steps, seed):
    rng = np.random.default_rng(seed)
    x = all_inputs(task.n)
    y = task(x)
    xw = windows(x, task.k)
    w = init_pm_one_over_k(q, task.k, rng)
    u = np.zeros((xw.shape[1], q))
    b = conv_bias(task.k)
    losses = []
    for s in range(steps + 1):
        h, pre = conv_forward(xw, w, u, b)
        losses.append(float(hinge(h, y).mean()))
        if s == steps:
            break
        dh = np.where(1 - h * y > 0, -y, 0.0) / len(x)
        act = np.maximum(pre, 0)
        gu = np.einsum("n,njq->jq", dh, act)
        gpre = dh[:, None, None] * u[None] * (pre > 0)
        gw = np.einsum("njq,njk->qk", gpre, xw)
        u -= eta * gu
        w -= eta * gw
    return losses


def test_stcsa_learn_matches_direct_implementation():
    task = make_kpattern(7, 2, 2, seed=3, kind="random")
    fast = stcsa_learn(task, 6, 0.5, 25, seed=4).losses
    slow = naive_stcsa_learn(task, 6, 0.5, 25, seed=4)
    assert np.allclose(fast, slow, atol=1e-12)


def test_bias_makes_units_pattern_indicators():
    k = 3
    w = init_pm_one_over_k(8, k, np.random.default_rng(0))
    z = all_inputs(k)
    act = np.maximum(z @ w.T + conv_bias(k), 0)
    match = (np.sign(w)[None, :, :] == z[:, None, :]).all(axis=2)
    assert np.allclose(act, match / k)


def test_margin_satisfying_init_has_zero_loss():
    task = KPatternTask(6, 2, 1, (1.0, 1.0, 1.0, 1.0), "constant")
    w = init_pm_one_over_k(64, 2, np.random.default_rng(0))
    ustar = construct_readout(w, task)
    run = stcsa_learn(task, 64, 0.1, 10, init=(w, ustar.u))
    assert run.losses[0] == 0.0 and run.final_loss == 0.0 and len(run.losses) == 11


def test_stcsa_learn_rejects_bad_init():
    task = make_kpattern(6, 2)
    with pytest.raises(TheoryConfigError):
        stcsa_learn(task, 4, 0.1, 1, init=(np.zeros((4, 3)), np.zeros((5, 4))))


def test_gd_loss_bound_and_gate_formulas():
    assert gd_loss_bound(0.1, 10, 12, 3, 256) == pytest.approx(
        0.01 * 100 * 12 * 3 ** 2.5 * 16 + 9 * 128 / (256 * 1.0) + 0.1 * 12 * 256 * 3)
    assert width_gate(3) == pytest.approx(64 * math.log(80))


def test_average_loss_within_bound_when_informative():
    task = make_kpattern(8, 2, 3)
    for eta in (1e-4, 1e-3, 1e-2):
        run = stcsa_learn(task, 32, eta, 200, seed=0)
        if run.bound_informative:
            assert run.avg_loss <= run.rhs


def test_fcsa_learn_runs_same_budget():
    run = fcsa_learn(make_kpattern(8, 3, 2), 16, 0.1, 30, seed=0)
    assert run.family == "fcsa" and len(run.losses) == 31
    assert run.losses[0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# interpolating readout


def test_readout_k1_q8_exact():
    task = make_kpattern(6, 1, 2)
    for seed in range(20):
        w = init_pm_one_over_k(8, 1, np.random.default_rng(seed))
        if len(set(np.sign(w[:, 0]))) < 2:
            continue
        us = construct_readout(w, task)
        assert us.residual <= 1e-12
        assert us.norm <= readout_norm_bound(1, 8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_readout_construction_interpolates_random_patterns(seed, k):
    rng = np.random.default_rng(seed)
    task = make_kpattern(8, k, int(rng.integers(0, 9 - k)), seed=seed, kind="random")
    w = init_pm_one_over_k(256, k, rng)
    try:
        us = construct_readout(w, task)
    except ConstructionFailed:
        return
    assert us.residual <= 1e-6
    assert us.norm <= us.bound


def test_readout_fails_for_narrow_layer():
    task = make_kpattern(6, 3)
    for seed in range(10):
        with pytest.raises(ConstructionFailed) as err:
            construct_readout(init_pm_one_over_k(2, 3, np.random.default_rng(seed)), task)
        assert len(err.value.missing) >= 6
        assert all(len(m) == 3 and set(m) <= {"+", "-"} for m in err.value.missing)


def test_readout_shape_and_size_checks():
    with pytest.raises(TheoryConfigError):
        construct_readout(np.ones((4, 2)), make_kpattern(6, 3))
    with pytest.raises(ResourceError):
        construct_readout(np.ones((4, 2)), make_kpattern(17, 2))


# ---------------------------------------------------------------------------
# sweeps


def small_grid(**kw):
    base = dict(n=[6], k=[2], q=[4], trials=3, learn_n=6, learn_k=2, learn_q=8, etas=[0.1], steps=20,
                readout_n=[6], readout_k=[2], readout_q=[16], readout_seeds=2)
    base.update(kw)
    return TheoryGrid(**base)


def test_empty_grid_writes_headers_only(tmp_path):
    grid = small_grid(n=[], etas=[], readout_n=[])
    sweep_and_report(tmp_path, grid)
    assert read_csv(tmp_path / "gradnorm.csv") == [["n", "k", "q", "trial", "sq_norm", "bound"]]
    assert read_csv(tmp_path / "learn.csv") == [["family", "n", "k", "q", "eta", "S", "step", "loss"]]
    assert read_csv(tmp_path / "readout.csv") == [["n", "k", "q", "seed", "residual", "u_norm", "bound"]]


def test_single_cell_reproduces_standalone_ops(tmp_path):
    from vsrt.theory import _cell_seed

    grid = small_grid()
    res = sweep_and_report(tmp_path, grid)
    task = make_kpattern(6, 2, 2)
    direct = fcsa_init_gradnorm(task, 4, 3, _cell_seed(0, 6, 2, 4))
    assert res["gradnorm"][0].sq_norms == direct.sq_norms
    rows = read_csv(tmp_path / "gradnorm.csv")[1:]
    assert [float(r[4]) for r in rows] == direct.sq_norms
    run = stcsa_learn(task, 8, 0.1, 20, _cell_seed(0, 7, 0))
    learn = [r for r in read_csv(tmp_path / "learn.csv")[1:] if r[0] == "stcsa"]
    assert [float(r[7]) for r in learn] == run.losses


def test_sweep_is_deterministic(tmp_path):
    sweep_and_report(tmp_path / "a", small_grid())
    sweep_and_report(tmp_path / "b", small_grid())
    for name in ("gradnorm.csv", "learn.csv", "readout.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_parts_and_validation(tmp_path):
    sweep_and_report(tmp_path, small_grid(), parts=("readout",))
    assert (tmp_path / "readout.csv").exists() and not (tmp_path / "learn.csv").exists()
    with pytest.raises(TheoryConfigError):
        sweep_and_report(tmp_path, small_grid(families=["mlp"]))
    with pytest.raises(TheoryConfigError):
        sweep_and_report(tmp_path, small_grid(etas=[-1.0]))
    with pytest.raises(TheoryConfigError):
        sweep_and_report(tmp_path, small_grid(n=8))


def test_failed_constructions_are_marked(tmp_path):
    sweep_and_report(tmp_path, small_grid(readout_k=[3], readout_q=[2]), parts=("readout",))
    rows = read_csv(tmp_path / "readout.csv")[1:]
    assert rows and all(r[4] == "failed" for r in rows)
