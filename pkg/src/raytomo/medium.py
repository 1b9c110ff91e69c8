"""Acoustic media, transducer rings, and the power-law dispersion relation.

A medium couples a sound-speed map c(x) and an absorption prefactor map
alpha0(x) on one grid with the power-law exponent y. The complex wavenumber is

    k~(x, omega) = omega / c + alpha * (tan(pi y / 2) + i),   alpha = alpha0 * omega**y

whose real part bends rays and whose imaginary part attenuates amplitudes.
alpha0 is held in internal units Np * (rad/s)**-y * m**-1; file and CLI inputs
use dB * MHz**-y * cm**-1 and are converted on the way in.

Point evaluation of the wavenumber goes through the slowness spline (control
points 1/c at the nodes) so that k is exactly linear in (omega, omega**y) for
every x; the per-frequency pipeline relies on that separability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import ConfigError, Grid2D, ScalarField, make_grid, smooth_field

__all__ = [
    "EllipseInclusion",
    "Medium",
    "PHANTOM_PRESETS",
    "TransducerRing",
    "alpha0_db_to_internal",
    "alpha0_internal_to_db",
    "desk_grid",
    "dispersion_wavenumber",
    "make_phantom",
    "phantom_preset",
    "tan_dispersion_factor",
    "water_medium",
]

SOUND_SPEED_BAND = (1000.0, 2500.0)

_DB_TO_NP = np.log(10.0) / 20.0
_PER_CM_TO_PER_M = 100.0
_MHZ_TO_RAD_S = 2.0e6 * np.pi


def alpha0_db_to_internal(alpha0_db, y):
    """dB MHz^-y cm^-1  ->  Np (rad/s)^-y m^-1."""
    return np.asarray(alpha0_db, dtype=float) * (
        _DB_TO_NP * _PER_CM_TO_PER_M / _MHZ_TO_RAD_S**y)


def alpha0_internal_to_db(alpha0_internal, y):
    return np.asarray(alpha0_internal, dtype=float) / (
        _DB_TO_NP * _PER_CM_TO_PER_M / _MHZ_TO_RAD_S**y)


def tan_dispersion_factor(y):
    """tan(pi y / 2) of the dispersion relation; y == 2 snaps to exactly 0."""
    if not 1.0 <= y <= 2.0:
        raise ConfigError(f"power-law exponent y={y} outside [1, 2]")
    if abs(y - 1.0) <= 1e-6:
        raise ConfigError(f"y={y} too close to 1: tan(pi y/2) is singular there")
    if abs(y - 2.0) <= 1e-12:
        return 0.0
    return float(np.tan(0.5 * np.pi * y))


class Medium:
    """Immutable sound-speed / absorption model on one grid.

    Parameters
    ----------
    sound_speed : ScalarField
        c(x) control points in m/s, within the physical band.
    alpha0 : ScalarField or None
        Absorption prefactor control points in internal units; None means
        lossless everywhere.
    power_y : float
        Dispersion exponent y in [1, 2], y != 1.
    c0 : float
        Background (water) sound speed in m/s.
    """

    def __init__(self, sound_speed: ScalarField, alpha0, power_y: float, c0: float):
        tan_dispersion_factor(power_y)  # validates y
        coeffs = sound_speed.coefficients
        lo, hi = SOUND_SPEED_BAND
        if coeffs.min() < lo or coeffs.max() > hi:
            raise ConfigError(
                f"sound speed range [{coeffs.min():.1f}, {coeffs.max():.1f}] m/s "
                f"outside physical band [{lo:.0f}, {hi:.0f}]")
        if not lo <= c0 <= hi:
            raise ConfigError(f"background speed c0={c0} outside physical band")
        if alpha0 is None:
            alpha0 = ScalarField(sound_speed.grid,
                                 np.zeros(sound_speed.grid.shape))
        if not alpha0.grid.same_geometry(sound_speed.grid):
            raise ConfigError("sound_speed and alpha0 must share one grid")
        if alpha0.coefficients.min() < 0:
            raise ConfigError("alpha0 must be non-negative")
        self.sound_speed = sound_speed
        self.alpha0 = alpha0
        self.power_y = float(power_y)
        self.c0 = float(c0)
        self.slowness = ScalarField(sound_speed.grid, 1.0 / coeffs)
        self._geom_cache: dict[int, tuple[ScalarField, ScalarField]] = {}

    @property
    def grid(self) -> Grid2D:
        return self.sound_speed.grid

    @property
    def tan_factor(self) -> float:
        return tan_dispersion_factor(self.power_y)

    @property
    def has_absorption(self) -> bool:
        return bool(self.alpha0.coefficients.max() > 0)

    def geometry_fields(self, window: int = 1):
        """(slowness, alpha0) splines smoothed for ray tracing.

        Smoothing the slowness/alpha0 control points is equivalent to
        smoothing the wavenumber control points at every frequency at once,
        because k's control points are a fixed linear combination of the two.
        """
        if window not in self._geom_cache:
            self._geom_cache[window] = (
                smooth_field(self.slowness, window),
                smooth_field(self.alpha0, window),
            )
        return self._geom_cache[window]

    def with_sound_speed(self, coefficients) -> "Medium":
        return Medium(ScalarField(self.grid, coefficients), self.alpha0,
                      self.power_y, self.c0)

    def sound_speed_at(self, points):
        """c at arbitrary points as 1/slowness-spline (matches the dispersion path)."""
        return 1.0 / self.slowness.eval_many(points)


def dispersion_wavenumber(medium: Medium, x, omega: float):
    """Real wavenumber k and absorption alpha at point x and frequency omega.

    Returns (k, alpha) with k = omega/c + alpha*tan(pi y/2), alpha = alpha0*omega**y.
    """
    if omega <= 0:
        raise ConfigError(f"omega must be positive, got {omega}")
    s = medium.slowness.eval(x)
    a0 = medium.alpha0.eval(x)
    alpha = a0 * omega**medium.power_y
    k = omega * s + alpha * medium.tan_factor
    if k <= 0:
        raise ConfigError(f"non-positive wavenumber k={k} at x={x}, omega={omega}")
    return k, alpha


@dataclass(frozen=True)
class TransducerRing:
    """Emitter/receiver positions on a circle around the imaged region."""

    center: tuple[float, float]
    radius: float
    emitters: np.ndarray
    receivers: np.ndarray

    def __post_init__(self):
        for name in ("emitters", "receivers"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) == 0:
                raise ConfigError(f"{name} must have shape (n, 2), got {arr.shape}")
            r = np.hypot(arr[:, 0] - self.center[0], arr[:, 1] - self.center[1])
            if np.max(np.abs(r - self.radius)) > 1e-9 * self.radius:
                raise ConfigError(f"{name} not on the ring circle")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def regular(cls, n_emitters, n_receivers, radius, center=(0.0, 0.0),
                receiver_offset=None):
        """Uniformly spaced transducers; receivers are rotated by half their
        spacing by default so no receiver coincides with an emitter."""
        if receiver_offset is None:
            receiver_offset = np.pi / n_receivers
        ang_e = 2 * np.pi * np.arange(n_emitters) / n_emitters
        ang_r = 2 * np.pi * np.arange(n_receivers) / n_receivers + receiver_offset
        make = lambda ang: np.column_stack(
            [center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])
        return cls(center=tuple(center), radius=float(radius),
                   emitters=make(ang_e), receivers=make(ang_r))

    @property
    def n_emitters(self):
        return len(self.emitters)

    @property
    def n_receivers(self):
        return len(self.receivers)

    def check_inside(self, grid: Grid2D):
        """The ring (plus one tracing step of slack) must sit in the grid interior."""
        pts = np.vstack([self.emitters, self.receivers])
        if not grid.interior_contains(pts).all():
            raise ConfigError("transducer ring does not fit inside the grid interior")


@dataclass(frozen=True)
class EllipseInclusion:
    """One elliptical inclusion of a phantom.

    speed in m/s; alpha0_db in dB MHz^-y cm^-1; angle in radians; edge_width
    (m) > 0 replaces the hard edge with a cosine ramp of that width.
    """

    center: tuple[float, float]
    semi_axes: tuple[float, float]
    speed: float
    alpha0_db: float = 0.0
    angle: float = 0.0
    edge_width: float = 0.0


def _inclusion_weight(inc: EllipseInclusion, x1, x2):
    """1 inside the ellipse, 0 outside, cosine ramp across edge_width."""
    d1 = x1 - inc.center[0]
    d2 = x2 - inc.center[1]
    ca, sa = np.cos(inc.angle), np.sin(inc.angle)
    e1 = (d1 * ca + d2 * sa) / inc.semi_axes[0]
    e2 = (-d1 * sa + d2 * ca) / inc.semi_axes[1]
    rho = np.sqrt(e1**2 + e2**2)
    if inc.edge_width <= 0:
        return (rho <= 1.0).astype(float)
    half = 0.5 * inc.edge_width / min(inc.semi_axes)
    t = np.clip((rho - (1.0 - half)) / (2.0 * half), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * t))


def make_phantom(grid: Grid2D, c0: float, power_y: float,
                 inclusions=(), alpha0_background_db: float = 0.0) -> Medium:
    """Rasterize elliptical inclusions into a Medium on `grid`.

    Later inclusions paint over earlier ones where they overlap. The maps are
    stored directly as control points (no prefilter), so constant regions are
    reproduced exactly and edges are softened over about one cell.
    """
    x1, x2 = np.meshgrid(*grid.axes(), indexing="ij")
    c = np.full(grid.shape, float(c0))
    a_db = np.full(grid.shape, float(alpha0_background_db))
    (lo1, hi1), (lo2, hi2) = grid.interior_bounds()
    margin = 2 * grid.spacing
    for inc in inclusions:
        r = max(inc.semi_axes) + inc.edge_width
        if (inc.center[0] - r < lo1 + margin or inc.center[0] + r > hi1 - margin
                or inc.center[1] - r < lo2 + margin or inc.center[1] + r > hi2 - margin):
            raise ConfigError(f"inclusion at {inc.center} reaches outside the grid interior")
        w = _inclusion_weight(inc, x1, x2)
        c = (1.0 - w) * c + w * inc.speed
        a_db = (1.0 - w) * a_db + w * inc.alpha0_db
    alpha0 = ScalarField(grid, alpha0_db_to_internal(a_db, power_y))
    return Medium(ScalarField(grid, c), alpha0, power_y, c0)


def water_medium(grid: Grid2D, c0: float = 1500.0, power_y: float = 2.0) -> Medium:
    """Homogeneous lossless water on `grid`."""
    return make_phantom(grid, c0, power_y)


def desk_grid(n: int = 64, ring_radius: float = 0.095, clearance: float = 0.13):
    """Grid sized so a centered ring of `ring_radius` sits well inside the interior."""
    spacing = 2.0 * ring_radius * (1.0 + clearance) / (n - 1)
    return make_grid(n, spacing)


#: Named phantoms for the bench-scale experiments. "disc" is a single +5%
#: absorbing disc; "ellipse" is the soft-tissue-like arrangement spanning the
#: 1470-1580 m/s and 0-1 dB MHz^-y cm^-1 ranges used by the end-to-end runs.
PHANTOM_PRESETS = {
    "disc": [
        EllipseInclusion(center=(0.01, -0.008), semi_axes=(0.03, 0.03),
                         speed=1575.0, alpha0_db=0.5, edge_width=0.002),
    ],
    "ellipse": [
        EllipseInclusion(center=(0.004, -0.006), semi_axes=(0.058, 0.068),
                         speed=1530.0, alpha0_db=0.4, angle=np.radians(15.0),
                         edge_width=0.004),
        EllipseInclusion(center=(-0.018, 0.020), semi_axes=(0.020, 0.016),
                         speed=1470.0, alpha0_db=0.25, angle=np.radians(-25.0),
                         edge_width=0.003),
        EllipseInclusion(center=(0.022, 0.018), semi_axes=(0.016, 0.020),
                         speed=1560.0, alpha0_db=0.75, angle=np.radians(40.0),
                         edge_width=0.003),
        EllipseInclusion(center=(0.008, -0.030), semi_axes=(0.010, 0.010),
                         speed=1580.0, alpha0_db=1.0, edge_width=0.002),
    ],
}


def phantom_preset(name: str, grid: Grid2D, c0: float = 1500.0,
                   power_y: float = 1.4) -> Medium:
    """One of the named phantoms rasterized on `grid`."""
    if name not in PHANTOM_PRESETS:
        raise ConfigError(
            f"unknown phantom preset {name!r}; have {sorted(PHANTOM_PRESETS)}")
    return make_phantom(grid, c0, power_y, PHANTOM_PRESETS[name])
