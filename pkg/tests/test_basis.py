"""Tests for the spline and RBF edge bases."""

from __future__ import annotations

import numpy as np
import pytest

from kansym.basis import RbfBasis, SplineBasis, fit_grid_range
from kansym.errors import ConfigError
from kansym.selftest import de_boor


class TestSplineBasis:
    def test_partition_of_unity(self):
        basis = SplineBasis(-2.0, 3.0, resolution=6, degree=3)
        values, _ = basis.design(np.linspace(-2.0, 3.0, 301))
        assert np.allclose(values.sum(axis=1), 1.0, atol=1e-12)

    def test_knot_count(self):
        basis = SplineBasis(0.0, 1.0, resolution=5, degree=2)
        assert basis.n_basis == 7
        assert basis.knots.size == 5 + 1 + 2 * 2
        assert basis.grid.tolist() == pytest.approx(np.linspace(0, 1, 6).tolist())

    def test_matches_de_boor(self, rng):
        basis = SplineBasis(-1.0, 1.0, resolution=7, degree=3,
                            coefficients=rng.standard_normal(10))
        xs = np.linspace(-1.0, 1.0, 57)
        oracle = [de_boor(basis.knots, basis.coefficients, 3, x) for x in xs]
        assert np.allclose(basis.evaluate(xs), oracle, atol=1e-12)

    def test_slope_matches_difference(self, rng):
        basis = SplineBasis(-1.0, 1.0, resolution=5, degree=3,
                            coefficients=rng.standard_normal(8))
        x = np.array([-0.63, 0.11, 0.52])
        _, slopes = basis.design(x)
        h = 1e-6
        numeric = (basis.evaluate(x + h) - basis.evaluate(x - h)) / (2 * h)
        assert np.allclose(slopes @ basis.coefficients, numeric, atol=1e-6)

    def test_clamped_outside_range(self, rng):
        basis = SplineBasis(0.0, 1.0, resolution=4, degree=3,
                            coefficients=rng.standard_normal(7))
        assert basis.evaluate(5.0) == pytest.approx(basis.evaluate(1.0))
        _, slopes = basis.design(np.array([5.0]))
        assert not slopes.any()

    def test_fit_reproduces_polynomial(self):
        basis = SplineBasis(-1.0, 1.0, resolution=4, degree=3)
        xs = np.linspace(-1.0, 1.0, 50)
        basis.fit(xs, xs**3 - xs)
        assert np.allclose(basis.evaluate(xs), xs**3 - xs, atol=1e-10)

    def test_empty_range_rejected(self):
        with pytest.raises(ConfigError):
            SplineBasis(1.0, 1.0)

    def test_wrong_coefficient_count(self):
        with pytest.raises(ConfigError):
            SplineBasis(0.0, 1.0, resolution=3, degree=3, coefficients=np.zeros(4))

    def test_default_init_is_seeded(self):
        a = SplineBasis(-1.0, 1.0, resolution=5)
        b = SplineBasis(-1.0, 1.0, resolution=5)
        a.init_default(np.random.default_rng(7))
        b.init_default(np.random.default_rng(7))
        assert np.array_equal(a.coefficients, b.coefficients)


class TestRbfBasis:
    def test_uniform_centres(self):
        basis = RbfBasis.uniform(-1.0, 1.0, 5)
        assert basis.centres.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
        assert basis.bandwidth == pytest.approx(0.5)

    def test_gaussian_bump(self):
        basis = RbfBasis(np.array([0.0, 2.0]), 1.0, np.array([2.0, 0.0]))
        assert basis.evaluate(1.0) == pytest.approx(2.0 * np.exp(-1.0))

    def test_clamps_outside_centres(self):
        basis = RbfBasis.uniform(-1.0, 1.0, 5)
        basis.coefficients = np.arange(5.0)
        assert basis.evaluate(3.0) == pytest.approx(basis.evaluate(1.0))
        assert basis.evaluate(-7.5) == pytest.approx(basis.evaluate(-1.0))
        _, slope = basis.design(np.array([-2.0, 2.0]))
        assert not slope.any()

    def test_needs_two_centres(self):
        with pytest.raises(ConfigError):
            RbfBasis.uniform(0.0, 1.0, 1)

    def test_bandwidth_positive(self):
        with pytest.raises(ConfigError):
            RbfBasis(np.array([0.0, 1.0]), 0.0)


class TestGridRange:
    def test_global_min_max(self):
        x = np.array([[0.5, -3.0], [2.0, np.nan]])
        assert fit_grid_range(x) == (-3.0, 2.0)

    def test_degenerate_range_widened(self):
        assert fit_grid_range(np.ones((3, 2))) == (0.5, 1.5)

    def test_no_finite_inputs(self):
        with pytest.raises(ConfigError):
            fit_grid_range(np.array([np.nan]))
