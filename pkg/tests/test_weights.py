import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mopi.core import DimensionMismatch, EmptyGroup, NotPositiveDefinite
from mopi.weights import (GaussianRKHS, IndicatorBasis, InnerMax, KernelGram, MiscoverageVector,
                          gaussian_cross, gaussian_kernel, inner_max_gradient, inner_max_indicator,
                          inner_max_rkhs, weight_from_dict)

from conftest import central_fd, rel_err


def test_gaussian_kernel_examples():
    assert gaussian_kernel([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    assert gaussian_kernel([0.0, 0.0], [1.0, 1.0], 1.0) == pytest.approx(math.exp(-1), abs=1e-12)
    vals = [gaussian_kernel([0.0], [1.0], b) for b in (0.5, 1, 2, 10, 100)]
    assert all(np.diff(vals) > 0) and vals[-1] > 0.9999
    with pytest.raises(ValueError):
        gaussian_kernel([0.0], [1.0], 0.0)
    with pytest.raises(DimensionMismatch):
        gaussian_kernel([0.0], [1.0, 2.0], 1.0)


def test_gram_is_symmetric_with_unit_diagonal(rng):
    g = KernelGram.build(rng.normal(size=(15, 3)), 0.8)
    np.testing.assert_array_equal(g.K, g.K.T)
    np.testing.assert_array_equal(np.diag(g.K), 1.0)
    assert np.linalg.eigvalsh(g.K).min() > -1e-10


def test_indicator_examples():
    phi = MiscoverageVector.from_indicators([1, 0], 0.5)
    assert inner_max_indicator([7, 7], phi)[0] == 0.0
    phi = MiscoverageVector.from_indicators([1, 0, 1, 1], 0.1)
    value, beta = inner_max_indicator([0, 0, 1, 1], phi)
    assert value == pytest.approx(0.02 + 0.10125, abs=1e-14)
    phi = MiscoverageVector.from_indicators(np.full(6, 0.2), 0.2)
    value, beta = inner_max_indicator([0, 1, 2, 0, 1, 2], phi)
    assert value == 0.0 and all(b == 0.0 for b in beta.values())


def test_indicator_errors():
    with pytest.raises(EmptyGroup):
        inner_max_indicator([0, 0], np.zeros(2), levels=(0, 1))
    with pytest.raises(DimensionMismatch):
        inner_max_indicator([0, 0, 1], np.zeros(2))


def test_rkhs_examples():
    value, coef = inner_max_rkhs(np.eye(3), np.zeros(3), 0.1)
    assert value == 0.0 and np.all(coef == 0)
    phi = np.array([0.45, -0.05])
    n, gamma = 2, 0.5
    value, _ = inner_max_rkhs(np.eye(2), phi, gamma)
    assert value == pytest.approx(0.25 * np.sum(phi**2) / (1 / n + gamma), abs=1e-15)
    with pytest.raises(NotPositiveDefinite):
        inner_max_rkhs(np.eye(2), phi, 0.0)
    with pytest.raises(DimensionMismatch):
        inner_max_rkhs(np.eye(3), phi, 0.1)


def _rkhs_instance(r, n):
    z = r.uniform(0, 3, size=(n, 1))
    gram = KernelGram.build(z, r.uniform(0.3, 2.0))
    phi = (r.uniform(size=n) - 0.1) / n
    return gram, phi, r.uniform(0.01, 1.0)


def test_gradient_matches_finite_differences():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(2, 20))
        gram, phi, gamma = _rkhs_instance(r, n)
        w = GaussianRKHS(gram.bandwidth, gamma)
        g = inner_max_gradient(w, gram, phi)
        fd = central_fd(lambda p: inner_max_rkhs(gram, p, gamma)[0], phi)
        assert rel_err(g, fd) <= 1e-5
        codes = r.integers(0, 3, size=n)
        g = inner_max_gradient(IndicatorBasis(), codes, phi)
        fd = central_fd(lambda p: inner_max_indicator(codes, p)[0], phi)
        assert rel_err(g, fd) <= 1e-5


def test_zero_phi_gives_zero_gradient(rng):
    gram, _, gamma = _rkhs_instance(rng, 6)
    assert np.all(inner_max_gradient(GaussianRKHS(1.0, gamma), gram, np.zeros(6)) == 0)
    assert np.all(inner_max_gradient(IndicatorBasis(), [0, 1, 0, 1, 2, 2], np.zeros(6)) == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 15), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_quadratic_form_homogeneity(n, c, seed):
    r = np.random.default_rng(seed)
    gram, phi, gamma = _rkhs_instance(r, n)
    w = GaussianRKHS(1.0, gamma)
    v1, g1 = InnerMax(w, gram).value_and_grad(phi)
    v2, g2 = InnerMax(w, gram).value_and_grad(c * phi)
    assert v1 >= 0
    np.testing.assert_allclose(g2, c * g1, rtol=1e-9, atol=1e-15)
    assert v2 == pytest.approx(c * c * v1, rel=1e-9, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 15), st.integers(0, 2**31 - 1))
def test_cached_inner_max_matches_closed_forms(n, seed):
    r = np.random.default_rng(seed)
    gram, phi, gamma = _rkhs_instance(r, n)
    w = GaussianRKHS(gram.bandwidth, gamma)
    v, g = InnerMax(w, gram).value_and_grad(phi)
    assert v == pytest.approx(inner_max_rkhs(gram, phi, gamma)[0], rel=1e-8, abs=1e-14)
    np.testing.assert_allclose(g, inner_max_gradient(w, gram, phi), rtol=1e-7, atol=1e-13)
    codes = r.integers(0, 3, size=n)
    v, g = InnerMax(IndicatorBasis(), codes).value_and_grad(phi)
    assert v == pytest.approx(inner_max_indicator(codes, phi)[0], rel=1e-12, abs=1e-16)


def test_weight_dict_round_trip():
    for w in (IndicatorBasis((0, 3)), GaussianRKHS(0.5, 1e-3)):
        assert weight_from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        GaussianRKHS(1.0, 0.0)
    assert gaussian_cross(np.zeros((2, 1)), np.ones((3, 1)), 1.0).shape == (2, 3)
