"""B-spline surface: basis values, spline evaluation against scipy, smoothing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from raytomo import ConfigError, DomainError, Grid2D, ScalarField, make_grid, smooth_field
from raytomo.grids import bspline_weights


def test_basis_values_at_knot():
    # cubic B-spline weights at u = 0: (1/6, 4/6, 1/6, 0) for the four
    # control points left..right of the cell
    w, dw = bspline_weights(0.0)
    assert np.allclose(w, [1 / 6, 4 / 6, 1 / 6, 0.0], atol=1e-15)
    # derivative weights at u = 0: (-1/2, 0, 1/2, 0)
    assert np.allclose(dw, [-0.5, 0.0, 0.5, 0.0], atol=1e-15)


def test_basis_values_at_midpoint():
    w, _ = bspline_weights(0.5)
    assert np.allclose(w, [1 / 48, 23 / 48, 23 / 48, 1 / 48], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_basis_partition_of_unity(u):
    w, dw = bspline_weights(u)
    assert abs(w.sum() - 1.0) < 1e-12
    assert abs(dw.sum()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=1e-4, max_value=1.0 - 1e-4, allow_nan=False))
def test_basis_nonnegative(u):
    w, _ = bspline_weights(u)
    assert (w >= -1e-15).all()


@pytest.fixture(scope="module")
def field_rand():
    rng = np.random.default_rng(7)
    grid = make_grid(16, 0.01)
    return ScalarField(grid, rng.standard_normal(grid.shape))


def test_eval_matches_scipy_spline(field_rand):
    """Spline evaluation oracle: scipy map_coordinates on the same control
    points (prefilter=False) must agree to rounding."""
    rng = np.random.default_rng(3)
    grid = field_rand.grid
    (lo1, hi1), (lo2, hi2) = grid.interior_bounds()
    pts = np.column_stack([rng.uniform(lo1, hi1, 200),
                           rng.uniform(lo2, hi2, 200)])
    ours = field_rand.eval_many(pts)
    coords = (pts - np.array(grid.origin)) / grid.spacing
    ref = ndimage.map_coordinates(field_rand.coefficients, coords.T,
                                  order=3, prefilter=False, mode="nearest")
    assert np.abs(ours - ref).max() < 1e-12


def test_gradient_matches_finite_differences(field_rand):
    grid = field_rand.grid
    x = np.array(grid.origin) + grid.spacing * np.array([7.3, 6.1])
    g = field_rand.gradient(x)
    h = 1e-6 * grid.spacing
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = h
        fd = (field_rand.eval(x + e) - field_rand.eval(x - e)) / (2 * h)
        assert abs(g[axis] - fd) < 1e-5 * max(1.0, abs(fd))


def test_eval_constant_field_exact():
    grid = make_grid(12, 0.02)
    field = ScalarField(grid, np.full(grid.shape, 3.25))
    (lo1, hi1), (lo2, hi2) = grid.interior_bounds()
    pts = np.column_stack([np.linspace(lo1, hi1, 50),
                           np.linspace(lo2, hi2, 50)])
    assert np.abs(field.eval_many(pts) - 3.25).max() < 1e-13


def test_from_node_values_interpolates():
    grid = make_grid(20, 0.01)
    a1, a2 = grid.axes()
    vals = np.sin(30 * a1)[:, None] * np.cos(25 * a2)[None, :]
    field = ScalarField.from_node_values(grid, vals)
    # node-exactness away from the mirror boundary
    nodes = grid.node_points().reshape(grid.shape + (2,))[3:-3, 3:-3]
    got = field.eval_many(nodes.reshape(-1, 2)).reshape(nodes.shape[:2])
    assert np.abs(got - vals[3:-3, 3:-3]).max() < 1e-9


def test_eval_outside_interior_raises(field_rand):
    grid = field_rand.grid
    with pytest.raises(DomainError):
        field_rand.eval(np.array(grid.origin))  # inside the 2-cell margin


def test_grid_validation():
    with pytest.raises(ConfigError):
        Grid2D((4, 4), 0.01, (0.0, 0.0))
    with pytest.raises(ConfigError):
        Grid2D((16, 16), -1.0, (0.0, 0.0))
    with pytest.raises(ConfigError):
        ScalarField(make_grid(10, 0.01), np.zeros((9, 10)))
    with pytest.raises(ConfigError):
        ScalarField(make_grid(10, 0.01), np.full((10, 10), np.nan))


def test_smooth_field_window_one_is_identity(field_rand):
    out = smooth_field(field_rand, 1)
    assert np.array_equal(out.coefficients, field_rand.coefficients)


def test_smooth_field_preserves_constants():
    grid = make_grid(16, 0.01)
    field = ScalarField(grid, np.full(grid.shape, 2.5))
    out = smooth_field(field, 7)
    assert np.abs(out.coefficients - 2.5).max() < 1e-14


def test_smooth_field_reduces_variance(field_rand):
    out = smooth_field(field_rand, 5)
    assert out.coefficients.var() < 0.5 * field_rand.coefficients.var()


def test_smooth_field_even_window_rejected(field_rand):
    with pytest.raises(ConfigError):
        smooth_field(field_rand, 4)
