"""Uniform square grids and cubic B-spline scalar fields.

A field is represented by a real array of control points Q on the grid nodes;
values and gradients anywhere in the interior come from the uniform cubic
B-spline surface built on those control points. The surface is C2-continuous,
which the ray equations rely on (they differentiate the wavenumber field).

Evaluation is restricted to the grid interior, two cells in from every edge,
so the full 4x4 control-point neighborhood (and one extra guard cell for
predictor steps of the tracer) always exists. Evaluating outside raises
DomainError naming the offending coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels

__all__ = [
    "ConfigError",
    "DomainError",
    "Grid2D",
    "ScalarField",
    "bspline_weights",
    "make_grid",
    "smooth_field",
]


class DomainError(ValueError):
    """A coordinate fell outside the evaluable grid interior."""


class ConfigError(ValueError):
    """Inconsistent or out-of-range configuration values."""


# Rows: weights of control points i-1 .. i+2 as cubic polynomials in the
# local coordinate u in [0, 1). Same matrix as the classic uniform cubic
# B-spline basis; at u=0 the weights are (1/6, 4/6, 1/6, 0).
BSPLINE_BASIS = (1.0 / 6.0) * np.array(
    [
        [-1.0, 3.0, -3.0, 1.0],
        [3.0, -6.0, 0.0, 4.0],
        [-3.0, 3.0, 3.0, 1.0],
        [1.0, 0.0, 0.0, 0.0],
    ]
)


def bspline_weights(u):
    """Weights (and du-derivatives) of the four cubic B-spline basis functions.

    Args:
        u: local cell coordinate(s) in [0, 1], scalar or array.

    Returns:
        (w, dw): arrays of shape u.shape + (4,).
    """
    u = np.asarray(u, dtype=float)
    powers = np.stack([u**3, u**2, u, np.ones_like(u)], axis=-1)
    dpowers = np.stack([3 * u**2, 2 * u, np.ones_like(u), np.zeros_like(u)], axis=-1)
    return powers @ BSPLINE_BASIS.T, dpowers @ BSPLINE_BASIS.T


@dataclass(frozen=True)
class Grid2D:
    """Uniform square grid: nodes at origin + (i, j) * spacing, row-major."""

    shape: tuple[int, int]
    spacing: float
    origin: tuple[float, float]

    def __post_init__(self):
        n1, n2 = self.shape
        if n1 < 8 or n2 < 8:
            raise ConfigError(f"grid shape {self.shape} too small (need >= 8 nodes per axis)")
        if not self.spacing > 0:
            raise ConfigError(f"grid spacing must be positive, got {self.spacing}")

    def axes(self):
        o1, o2 = self.origin
        n1, n2 = self.shape
        return (o1 + self.spacing * np.arange(n1), o2 + self.spacing * np.arange(n2))

    def node_points(self):
        """All node coordinates, shape (n1*n2, 2), row-major (axis-0 major)."""
        a1, a2 = self.axes()
        x1, x2 = np.meshgrid(a1, a2, indexing="ij")
        return np.column_stack([x1.ravel(), x2.ravel()])

    def interior_bounds(self):
        """((lo1, hi1), (lo2, hi2)) of the evaluable interior (2-cell margin)."""
        o1, o2 = self.origin
        n1, n2 = self.shape
        h = self.spacing
        return ((o1 + 2 * h, o1 + (n1 - 3) * h), (o2 + 2 * h, o2 + (n2 - 3) * h))

    def interior_contains(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (lo1, hi1), (lo2, hi2) = self.interior_bounds()
        return (
            (pts[:, 0] >= lo1) & (pts[:, 0] <= hi1)
            & (pts[:, 1] >= lo2) & (pts[:, 1] <= hi2)
        )

    def check_interior(self, x):
        x1, x2 = float(x[0]), float(x[1])
        (lo1, hi1), (lo2, hi2) = self.interior_bounds()
        if not lo1 <= x1 <= hi1:
            raise DomainError(f"x1={x1:.6g} outside grid interior [{lo1:.6g}, {hi1:.6g}]")
        if not lo2 <= x2 <= hi2:
            raise DomainError(f"x2={x2:.6g} outside grid interior [{lo2:.6g}, {hi2:.6g}]")

    def disc_mask(self, center, radius):
        """Boolean node mask of the disc |x - center| < radius, shape = grid shape."""
        a1, a2 = self.axes()
        d1 = a1[:, None] - center[0]
        d2 = a2[None, :] - center[1]
        return d1**2 + d2**2 < radius**2

    def same_geometry(self, other, tol=1e-12):
        return (
            self.shape == other.shape
            and abs(self.spacing - other.spacing) <= tol * self.spacing
            and abs(self.origin[0] - other.origin[0]) <= tol
            and abs(self.origin[1] - other.origin[1]) <= tol
        )


def make_grid(n, spacing, center=(0.0, 0.0)):
    """Square n x n grid centered on `center`."""
    half = 0.5 * (n - 1) * spacing
    return Grid2D(shape=(n, n), spacing=float(spacing),
                  origin=(center[0] - half, center[1] - half))


@dataclass(frozen=True)
class ScalarField:
    """Cubic B-spline surface over a Grid2D; `coefficients` are the control points."""

    grid: Grid2D
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        coeffs = np.ascontiguousarray(np.asarray(self.coefficients, dtype=np.float64))
        if coeffs.shape != self.grid.shape:
            raise ConfigError(
                f"coefficient shape {coeffs.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise ConfigError("field coefficients must be finite")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def from_node_values(cls, grid, values):
        """Field whose spline interpolates `values` exactly at the grid nodes.

        Solves for control points with the standard cubic-spline prefilter
        (mirror boundaries). Use for smooth analytic fields; for discontinuous
        maps prefer raw control points to avoid overshoot at the jumps.
        """
        coeffs = ndimage.spline_filter(np.asarray(values, dtype=np.float64),
                                       order=3, mode="mirror")
        return cls(grid=grid, coefficients=coeffs)

    def _kernel_args(self):
        g = self.grid
        return (self.coefficients, g.origin[0], g.origin[1], 1.0 / g.spacing,
                g.shape[0], g.shape[1])

    def eval(self, x):
        """Spline value at a single point (interior only)."""
        self.grid.check_interior(x)
        v, _, _ = _kernels.eval_point(*self._kernel_args(), float(x[0]), float(x[1]))
        return float(v)

    def gradient(self, x):
        """Spline gradient at a single point (interior only)."""
        self.grid.check_interior(x)
        _, g1, g2 = _kernels.eval_point(*self._kernel_args(), float(x[0]), float(x[1]))
        return np.array([g1, g2])

    def eval_many(self, points, with_gradient=False):
        """Values (and optionally gradients) at an (N, 2) array of points."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        inside = self.grid.interior_contains(pts)
        if not inside.all():
            bad = pts[np.argmin(inside)]
            self.grid.check_interior(bad)  # raises with the offending coordinate
        values = np.empty(len(pts))
        grads = np.empty((len(pts), 2)) if with_gradient else np.empty((0, 2))
        _kernels.eval_many(*self._kernel_args(), pts, values, grads, with_gradient)
        return (values, grads) if with_gradient else values

    def with_coefficients(self, coefficients):
        return ScalarField(grid=self.grid, coefficients=coefficients)


def smooth_field(field_in: ScalarField, window: int) -> ScalarField:
    """Moving-average smoothing of the control points (edge-replicated).

    `window` must be odd and >= 1; window 1 returns the field unchanged.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    if window == 1:
        return field_in
    smoothed = ndimage.uniform_filter(field_in.coefficients, size=window, mode="nearest")
    return field_in.with_coefficients(smoothed)
