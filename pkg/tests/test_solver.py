import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mopi.core import Dataset, NonFiniteObjective
from mopi.datagen import GeneratorSpec, generate
from mopi.metrics import coverage_by_level
from mopi.pretrain import ConstantScales, fit_ridge_mean
from mopi.sets import AbsResidualScore, Box, PredictionRule, Sublevel, Surrogate
from mopi.shapes import ConstantVector, init_shape
from mopi.solver import (Adam, AdamConfig, DiscreteLaw, FitTrace, SolverConfig, fit_mopi, mopi_objective,
                         population_inner_max, population_msce, verify_prop_equivalence)
from mopi.weights import GaussianRKHS, IndicatorBasis

from conftest import FixedMean


def test_objective_is_penalty_only_when_moments_vanish():
    alpha, r, nu = 0.2, 0.1, 0.05
    cal = Dataset(np.zeros((8, 1)), np.full(8, 1.5), np.array([0, 1] * 4))
    fam = Sublevel(AbsResidualScore(FixedMean([0.0])))
    thr = 1.5 - r * math.log(alpha / (1 - alpha))  # sigmoid(T / r) == alpha
    shape = ConstantVector(1, [thr])
    value, grad = mopi_objective(fam, shape, IndicatorBasis(), cal, alpha, Surrogate("sigmoid", r), nu=nu)
    assert value == pytest.approx(nu * thr**2, abs=1e-12)
    assert grad[0] == pytest.approx(2 * nu * thr, abs=1e-10)


def test_grid_minimum_matches_solver_on_scalar_threshold():
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 1, size=(200, 1))
    cal = Dataset(X, rng.normal(size=200) * (0.5 + X[:, 0]))
    fam = Sublevel(AbsResidualScore(FixedMean([0.0])))
    w = GaussianRKHS(0.3, 1e-2)
    sur = Surrogate("sigmoid", 0.3)  # wide enough for a single basin on this sample
    grid = np.linspace(0.2, 3.0, 561)
    vals = [mopi_objective(fam, ConstantVector(1, [t]), w, cal, 0.1, sur)[0] for t in grid]
    rule, trace = fit_mopi(fam, ConstantVector(1, [1.0]), w, cal, 0.1,
                           SolverConfig(sur, AdamConfig(lr=0.01), iterations=1500))
    best = rule.shape.params[0]
    assert abs(best - grid[int(np.argmin(vals))]) <= 2 * (grid[1] - grid[0])
    assert min(trace.objective) <= min(vals) + 1e-9


def test_degenerate_identical_labels():
    cal = Dataset(np.linspace(0, 1, 50)[:, None], np.full(50, 2.0))
    fam = Sublevel(AbsResidualScore(FixedMean([2.0])))
    rule, _ = fit_mopi(fam, ConstantVector(1, [0.5]), GaussianRKHS(0.5, 1e-2), cal, 0.1,
                       SolverConfig(Surrogate("sigmoid", 0.1), iterations=200))
    assert np.mean(~rule.contains(cal.X, cal.Y)) <= 0.1


def test_iteration_zero_is_the_pretrained_set():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 1))
    cal = Dataset(X, rng.normal(size=(60, 2)))
    box = Box(FixedMean([0.0, 0.0]), ConstantScales([1.0, 1.0]), 2)
    shape = init_shape("linear", 2, X=X)
    value0, _ = mopi_objective(box, shape, GaussianRKHS(1.0, 1e-2), cal, 0.1)
    rule, trace = fit_mopi(box, shape, GaussianRKHS(1.0, 1e-2), cal, 0.1, SolverConfig(iterations=5))
    assert trace.objective[0] == value0
    assert trace.objective[trace.best_iteration] == min(trace.objective)
    init_rule = PredictionRule(box, shape)
    np.testing.assert_allclose(init_rule.volume(X), 4.0)
    np.testing.assert_allclose(trace.params, rule.shape.params)


def test_nonfinite_objective_carries_trace():
    cal = Dataset(np.zeros((4, 1)), np.array([0.0, 1.0, np.nan, 2.0]))
    fam = Sublevel(AbsResidualScore(FixedMean([0.0])))
    with pytest.raises(NonFiniteObjective) as info:
        fit_mopi(fam, ConstantVector(1, [1.0]), GaussianRKHS(1.0, 0.1), cal, 0.1, SolverConfig(iterations=3))
    assert isinstance(info.value.trace, FitTrace)


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(3, AdamConfig(lr=0.1))
    theta = opt.step(np.zeros(3), np.array([2.0, -5.0, 0.0]))
    np.testing.assert_allclose(theta, [-0.1, 0.1, 0.0], atol=1e-7)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(iterations=0)
    with pytest.raises(ValueError):
        SolverConfig(nu=-1.0)
    with pytest.raises(ValueError):
        AdamConfig(lr=0.0)


def test_trace_csv(tmp_path):
    tr = FitTrace()
    tr.record(1.0, np.ones(2))
    tr.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,objective,grad_norm"


def test_prop_equivalence_exact_coverage_gives_zero():
    # z = 0 owns x in {0, 1}, z = 1 owns x in {2, 3}; each (x, y) has mass 1/20
    law = DiscreteLaw(np.repeat(np.arange(4), 5), np.tile(np.arange(5), 4), np.repeat([0, 0, 1, 1], 5),
                      np.full(20, 0.05))
    cover = np.ones((4, 5), dtype=bool)
    cover[0, 0] = cover[3, 4] = False  # miscoverage 1/10 in both z levels
    assert population_msce(law, cover, 0.1) == pytest.approx(0.0, abs=1e-16)
    assert population_inner_max(law, cover, 0.1) == pytest.approx(0.0, abs=1e-16)


def test_prop_equivalence_two_point_example():
    law = DiscreteLaw([0, 0, 0, 0, 0, 1, 1, 1, 1, 1], [0, 1, 2, 3, 4, 0, 1, 2, 3, 4], [0] * 5 + [1] * 5,
                      np.full(10, 0.1))
    cover = np.ones((2, 5), dtype=bool)
    cover[0, 0] = False  # z = 0 miscoverage 0.2, z = 1 miscoverage 0
    rep = verify_prop_equivalence(law, [cover], 0.1)
    assert rep["msce"][0] == pytest.approx(0.01, abs=1e-15)
    assert rep["max_psi"][0] == pytest.approx(0.0025, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prop_equivalence_random_laws(seed):
    r = np.random.default_rng(seed)
    law = DiscreteLaw.random(r, n_x=5, n_y=4, n_z=3)
    cands = [r.uniform(size=(5, 4)) < 0.85 for _ in range(6)]
    rep = verify_prop_equivalence(law, cands, 0.1)
    assert rep["identity_holds"] and rep["argmin_agree"]


@pytest.mark.slow
def test_equalized_setting_per_level_coverage():
    """Indicator weights over the binary Z, RKHS shape over X: per-level
    miscoverage on a large fresh sample stays within alpha +- 0.03 on average."""
    covs = []
    for seed in range(20):
        pre = generate(GeneratorSpec("Equalized1", 3000, seed=3 * seed), "pretrain")
        cal = generate(GeneratorSpec("Equalized1", 1500, seed=3 * seed + 1), "calibration")
        test = generate(GeneratorSpec("Equalized1", 100_000, seed=3 * seed + 2), "test")
        fam = Sublevel(AbsResidualScore(fit_ridge_mean(pre)))
        neutral = float(np.quantile(fam.score(pre.X, pre.Y), 0.9))
        shape = init_shape("rkhs", 1, neutral=neutral, rng=seed, X=cal.X, n_anchor=200, bandwidth=3.0)
        rule, _ = fit_mopi(fam, shape, IndicatorBasis(), cal, 0.1,
                           SolverConfig(Surrogate("sigmoid", 0.1), AdamConfig(lr=0.02), iterations=2000))
        covs.append(list(coverage_by_level(rule, test).values()))
    miss = 1 - np.mean(covs, axis=0)
    assert np.all(np.abs(miss - 0.1) <= 0.03), miss
