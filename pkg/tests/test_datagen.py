import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mopi.core import Dataset
from mopi.datagen import (EQ2_A, EQ2_C, EQ2_DELTA, EQ2_GAMMA, EQ2_SEED, GeneratorSpec, GroupScheme, ParseError,
                          SchemaError, UnsupportedKind, conditional_law, export_csv, generate, ingest_csv,
                          mixture_weights, multilabel_moments, oracle_rule)


def test_multilabel_moments_at_zero():
    mean, cov = multilabel_moments(np.zeros((1, 1)), 2)
    np.testing.assert_allclose(mean[0], [math.sin(1) + 0.3, math.sin(2) + 0.6], atol=1e-12)
    np.testing.assert_allclose(mean[0], [1.14147, 1.50930], atol=1e-5)
    assert cov[0, 0, 0] == pytest.approx(1.41395, abs=1e-5)
    assert cov[0, 0, 1] == pytest.approx(0.6 * math.sqrt(cov[0, 0, 0] * cov[0, 1, 1]))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 5), st.sampled_from([2, 4, 6]))
def test_multilabel_covariance_is_spd(x, d_y):
    _, cov = multilabel_moments(np.array([[x]]), d_y)
    assert np.all(np.linalg.eigvalsh(cov[0]) > 0)


def test_setting2_constants_reproduce_from_seed():
    r = np.random.default_rng(np.random.SeedSequence(EQ2_SEED))
    a, delta, gamma = (r.uniform(-1, 1, size=(4, 11)) for _ in range(3))
    c = r.uniform(0.5, 1.5, size=4)
    for got, want in [(EQ2_A, a), (EQ2_DELTA, delta), (EQ2_GAMMA, gamma), (EQ2_C, c)]:
        np.testing.assert_allclose(got, want, atol=5e-7)
    w = mixture_weights(r.normal(size=(5, 11)))
    np.testing.assert_allclose(w.sum(axis=1), 1.0)


def test_equalized_z_definitions():
    d = generate(GeneratorSpec("Equalized1", 2000, seed=1))
    np.testing.assert_array_equal(d.Z, (d.X[:, 0] <= 2.5).astype(int))
    d1 = generate(GeneratorSpec("Equalized1Prime", 2000, seed=1, rho=1.0))
    np.testing.assert_array_equal(d1.Z, (d1.X[:, 0] <= 2.5).astype(int))
    d0 = generate(GeneratorSpec("Equalized1Prime", 20000, seed=1, rho=0.0))
    # rho = 0: Z = 1{V <= 0} independent of X
    assert abs(d0.Z.mean() - 0.5) < 0.02
    assert abs(np.corrcoef(d0.Z, d0.X[:, 0])[0, 1]) < 0.03
    d2 = generate(GeneratorSpec("Equalized2", 500, seed=1))
    assert set(np.unique(d2.Z)) <= {1, 2, 3, 4}


def test_equalized1_variance_at_z1():
    X = np.zeros((1, 11))
    X[0, 0] = 1.0
    law = conditional_law(GeneratorSpec("Equalized1", 1), X)
    assert law.cov[0, 0, 0] == pytest.approx(2.0)
    assert law.mean[0, 0] == pytest.approx(1 / math.sqrt(11) + 0.5)


@pytest.mark.parametrize("kind", ["Hetero1x", "Hetero2x", "Hetero3x", "Equalized1"])
def test_oracle_interval_misses_alpha(kind):
    spec = GeneratorSpec(kind, 50)
    d = generate(spec)
    rule = oracle_rule(spec, 0.1)
    law = conditional_law(spec, d.X)
    q = law.quantile(0.95) - law.mean[:, 0]
    miss = 1 - law.interval_probability(law.mean[:, 0] - q, law.mean[:, 0] + q)
    np.testing.assert_allclose(miss, 0.10, atol=1e-12)
    np.testing.assert_allclose(rule.shape_values(d.X)[:, 0], q)


def test_oracle_refuses_non_measurable_z():
    with pytest.raises(UnsupportedKind):
        oracle_rule(GeneratorSpec("Equalized2", 5), 0.1)
    with pytest.raises(UnsupportedKind):
        oracle_rule(GeneratorSpec("MultiLabel51", 5), 0.1)


def test_generator_validation():
    with pytest.raises(UnsupportedKind):
        GeneratorSpec("Nope", 5)
    with pytest.raises(ValueError):
        GeneratorSpec("Hetero1x", 5, d_x=7)
    with pytest.raises(ValueError):
        GeneratorSpec("MultiLabel51", 5, d_y=3)


def test_generation_is_deterministic():
    a = generate(GeneratorSpec("MultiLabel51", 100, seed=9, d_y=4))
    b = generate(GeneratorSpec("MultiLabel51", 100, seed=9, d_y=4))
    c = generate(GeneratorSpec("MultiLabel51", 100, seed=10, d_y=4))
    np.testing.assert_array_equal(a.Y, b.Y)
    assert not np.array_equal(a.Y, c.Y)


def test_group_codes_are_bit_vectors():
    g = GroupScheme("Interval1D")
    X = np.array([[0.5], [4.5], [5.0]])
    np.testing.assert_array_equal(g.codes(X), [1, 16, 0])
    assert GroupScheme("ComplexOverlap").n_groups == 4


def test_ingest_codes_and_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y,g,note\n1,2,b,hi\n3,4,a,\n5,6,b,x\n")
    d = ingest_csv(p, {"x": "x", "y": "y", "g": "z_cat", "note": "ignore"})
    np.testing.assert_array_equal(d.Z, [1, 0, 1])
    np.testing.assert_array_equal(d.Y[:, 0], [2, 4, 6])
    p.write_text("x,y,g\n1,2,10\n3,4,2\n")
    np.testing.assert_array_equal(ingest_csv(p, {"x": "x", "y": "y", "g": "z_cat"}).Z, [10, 2])
    p.write_text("x,y\n1,2\n3,oops\n")
    with pytest.raises(ParseError) as info:
        ingest_csv(p, {"x": "x", "y": "y"})
    assert info.value.row == 3 and info.value.column == "y"
    p.write_text("x,y\n1,\n")
    with pytest.raises(ParseError):
        ingest_csv(p, {"x": "x", "y": "y"})
    with pytest.raises(SchemaError):
        ingest_csv(p, {"x": "x"})
    with pytest.raises(SchemaError):
        ingest_csv(p, {"x": "x", "y": "label"})


@pytest.mark.parametrize("spec", [GeneratorSpec("Hetero2x", 40, seed=2, d_x=11),
                                  GeneratorSpec("Equalized2", 40, seed=2),
                                  GeneratorSpec("MultiLabel51", 40, seed=2, d_y=6)])
def test_csv_round_trip(tmp_path, spec):
    d = generate(spec, "calibration")
    schema = export_csv(d, tmp_path / "d.csv", {"note": 1})
    back = ingest_csv(tmp_path / "d.csv", schema)
    np.testing.assert_allclose(back.X, d.X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.Y, d.Y, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(back.Z, d.Z)
    assert back.z_kind == d.z_kind
