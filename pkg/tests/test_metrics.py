import math

import numpy as np
import pytest

from mopi.core import Dataset, EmptyGroup
from mopi.datagen import GeneratorSpec, GroupScheme, conditional_law, generate, mixture_weights, oracle_rule
from mopi.metrics import (AllBinsEmpty, ZeroWeightMass, binned_miscoverage, evaluate_rule,
                          exact_msce, group_coverage, linear_reweighting_coverage, lower_median,
                          marginal_coverage, root_msce_binned, root_msce_levels, set_size_summary,
                          worst_case_ball_coverage)
from mopi.pretrain import ConstantScales
from mopi.sets import AbsResidualScore, Box, PredictionRule, Sublevel
from mopi.shapes import ConstantVector

from conftest import FixedMean

# covers Y = 0, misses Y = 1
HALF = PredictionRule(Sublevel(AbsResidualScore(FixedMean([0.0]))), ConstantVector(1, [0.5]))


def _data(x, missed, Z=None):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return Dataset(x, np.asarray(missed, dtype=float), Z, role="test")


def test_marginal_examples():
    assert marginal_coverage(HALF, _data(np.zeros(4), [0, 0, 0, 1])) == 0.75
    assert marginal_coverage(HALF, _data(np.zeros(3), [0, 0, 0])) == 1.0


def test_binned_example():
    # bin [0, 0.5) misses 0 of 5, bin [0.5, 1] misses 1 of 5: deviations -0.1 and +0.1
    x = np.r_[np.linspace(0, 0.4, 5), np.linspace(0.6, 1.0, 5)]
    missed = np.r_[np.zeros(5), 1, 0, 0, 0, 0]
    assert root_msce_binned(HALF, _data(x, missed), 0.1, bins=2) == pytest.approx(0.1)
    rep = root_msce_binned(HALF, _data(x, missed), 0.1, bins=4, report=True)
    assert rep.dropped == 0 and rep.counts.sum() == 10
    rep = binned_miscoverage(np.ones(3, bool), np.array([0.0, 0.1, 1.0]), bins=4)
    assert rep.dropped == 2
    with pytest.raises(AllBinsEmpty):
        binned_miscoverage(np.ones(2, bool), np.array([5.0, 6.0]), bins=3, value_range=(0, 1))


def test_level_and_group_metrics():
    d = _data(np.zeros(6), [0, 0, 1, 0, 0, 0], Z=np.array([0, 0, 0, 1, 1, 1]))
    assert group_coverage(HALF, d) == {0: pytest.approx(2 / 3), 1: 1.0}
    assert root_msce_levels(HALF, d, 0.1) == pytest.approx(math.sqrt(((1 / 3 - 0.1) ** 2 + 0.01) / 2))
    g = GroupScheme("Interval1D")
    x = np.array([0.5, 0.5, 1.5, 1.5, 2.5, 3.5, 4.5])
    cov = group_coverage(HALF, _data(x, [1, 0, 0, 0, 0, 0, 0]), g)
    assert cov["[0,1)"] == 0.5 and cov["[4,5)"] == 1.0
    with pytest.raises(EmptyGroup):
        group_coverage(HALF, _data([0.5], [0]), g)
    out = evaluate_rule(HALF, d, 0.1, ["coverage_z", "marginal"])
    assert out["max_gap_z"] == pytest.approx(0.9 - 2 / 3)


def test_reweighting_example():
    d = _data(np.zeros(4), [1, 1, 1, 0])
    assert linear_reweighting_coverage(HALF, d, [1, 1, 1, 1]) == 0.25
    assert linear_reweighting_coverage(HALF, d, [0, 0, 0, 2]) == 1.0
    with pytest.raises(ZeroWeightMass):
        linear_reweighting_coverage(HALF, d, np.zeros(4))
    with pytest.raises(ValueError):
        linear_reweighting_coverage(HALF, d, [-1, 1, 1, 1])


def test_ball_coverage():
    x = np.r_[np.zeros(10), np.full(10, 10.0)]
    d = _data(x, np.r_[np.zeros(10), np.ones(5), np.zeros(5)])
    v = worst_case_ball_coverage(HALF, d, 0, n_balls=20, radius=1.0)
    assert v == 0.5  # centres without replacement visit both clusters
    assert worst_case_ball_coverage(HALF, d, 0, n_balls=3, radius=100.0) == 0.75


def test_set_size_median():
    box = PredictionRule(Box(FixedMean([0.0, 0.0, 0.0]), ConstantScales([1.0, 1.0, 1.0]), 3),
                         ConstantVector(3, [0.0, 0.0, 0.0]))
    d = Dataset(np.zeros((4, 1)), np.zeros((4, 3)), role="test")
    assert set_size_summary(box, d)["median_volume"] == pytest.approx(8.0)
    assert lower_median([4, 1, 3, 2]) == 2


def test_exact_msce_of_oracle_is_zero():
    spec = GeneratorSpec("Hetero1x", 1)
    r = exact_msce(oracle_rule(spec, 0.1), spec, 0.1, n_outer=2000)
    assert r.value == pytest.approx(0.0, abs=1e-20)


def _mean_of(spec):
    class M:
        def predict(self, X):
            return conditional_law(spec, X).mean
    return M()


def test_exact_msce_mixture_formula():
    """Setting 2: alpha(z) = E[w_z(X) p_z(X)] / E[w_z(X)] with softmax weights."""
    spec = GeneratorSpec("Equalized2", 1)
    mean0 = FixedMean([0.0])
    rule = PredictionRule(Sublevel(AbsResidualScore(mean0)), ConstantVector(1, [3.0]))
    rng = np.random.default_rng(1)
    X = np.c_[rng.uniform(0, 5, 400_000), rng.standard_normal((400_000, 10))]
    W = mixture_weights(X)
    alpha_z = []
    for z in range(1, 5):
        law = conditional_law(spec, X, np.full(X.shape[0], z))
        p = 1 - law.interval_probability(-3.0, 3.0)
        alpha_z.append(np.sum(W[:, z - 1] * p) / W[:, z - 1].sum())
    want = float(np.sum(W.mean(axis=0) * (np.array(alpha_z) - 0.1) ** 2))
    got = exact_msce(rule, spec, 0.1, n_outer=400_000, seed=5)
    assert got.value == pytest.approx(want, abs=5 * got.mc_error + 1e-4)


def test_binned_estimate_tracks_exact_x1_msce():
    spec = GeneratorSpec("Hetero1x", 1_000_000, seed=11)
    rule = PredictionRule(Sublevel(AbsResidualScore(_mean_of(spec))), ConstantVector(1, [5.0]))
    test = generate(spec)
    binned = root_msce_binned(rule, test, 0.1, bins=100, value_range=(0.0, 5.0))
    exact = exact_msce(rule, spec, 0.1, n_outer=4000, x1_grid=100)
    assert abs(binned**2 - exact.value) <= 2e-3
