"""Dispersion relation, absorption units, phantoms, and the transducer ring."""

import numpy as np
import pytest

from raytomo import (
    ConfigError,
    EllipseInclusion,
    Medium,
    ScalarField,
    TransducerRing,
    alpha0_db_to_internal,
    alpha0_internal_to_db,
    desk_grid,
    dispersion_wavenumber,
    make_grid,
    make_phantom,
    phantom_preset,
    tan_dispersion_factor,
    water_medium,
)
from raytomo.medium import SOUND_SPEED_BAND


# ---------------------------------------------------------------------------
# dispersion factor and units


def test_tan_factor_y2_exactly_zero():
    assert tan_dispersion_factor(2.0) == 0.0
    assert tan_dispersion_factor(2.0 - 1e-13) == 0.0


def test_tan_factor_reference_values():
    # tan(pi y / 2) at y = 1.5 is tan(3 pi / 4) = -1
    assert abs(tan_dispersion_factor(1.5) - (-1.0)) < 1e-12
    assert abs(tan_dispersion_factor(4 / 3) - (-np.sqrt(3.0))) < 1e-12


def test_tan_factor_rejects_y_near_one_and_out_of_range():
    for bad in (1.0, 1.0 + 1e-7, 0.9, 2.1):
        with pytest.raises(ConfigError):
            tan_dispersion_factor(bad)


def test_alpha0_unit_conversion_round_trip():
    y = 1.4
    a_db = np.array([0.25, 0.5, 1.0])
    internal = alpha0_db_to_internal(a_db, y)
    back = alpha0_internal_to_db(internal, y)
    assert np.allclose(back, a_db, rtol=1e-13)


def test_alpha0_conversion_frozen_value():
    # 1 dB MHz^-2 cm^-1 at y = 2: ln(10)/20 * 100 / (2 pi 1e6)^2 Np (rad/s)^-2 m^-1
    expected = np.log(10.0) / 20.0 * 100.0 / (2 * np.pi * 1e6) ** 2
    assert abs(alpha0_db_to_internal(1.0, 2.0) - expected) < 1e-25
    # frozen numeric pin (independent hand evaluation)
    assert abs(alpha0_db_to_internal(1.0, 2.0) - 2.916258088e-13) < 1e-21


def test_absorption_in_db_restated_at_1mhz():
    """alpha(omega) for 0.5 dB MHz^-y cm^-1 at f = 1 MHz must equal
    0.5 dB/cm regardless of y."""
    for y in (1.4, 1.7, 2.0):
        a0 = alpha0_db_to_internal(0.5, y)
        alpha_np_per_m = a0 * (2 * np.pi * 1e6) ** y
        alpha_db_per_cm = alpha_np_per_m * 20.0 / np.log(10.0) / 100.0
        assert abs(alpha_db_per_cm - 0.5) < 1e-12


def test_wavenumber_terms():
    """k = omega/c + tan * a0 omega^y and alpha = a0 omega^y at a point of a
    homogeneous absorbing medium."""
    y = 1.4
    grid = make_grid(16, 0.01)
    a0_int = alpha0_db_to_internal(0.7, y)
    med = Medium(ScalarField(grid, np.full(grid.shape, 1540.0)),
                 ScalarField(grid, np.full(grid.shape, a0_int)), y, 1500.0)
    tan = tan_dispersion_factor(y)
    x = (0.01, 0.02)
    for f in (0.3e6, 0.85e6, 1.5e6):
        w = 2 * np.pi * f
        k, alpha = dispersion_wavenumber(med, x, w)
        assert abs(alpha - a0_int * w**y) < 1e-12 * abs(k)
        assert abs(k - (w / 1540.0 + tan * a0_int * w**y)) < 1e-9 * abs(k)


def test_wavenumber_lossless():
    grid = make_grid(16, 0.01)
    med = water_medium(grid)
    k, alpha = dispersion_wavenumber(med, (0.0, 0.0), 2 * np.pi * 1e6)
    assert alpha == 0.0
    assert abs(k - 2 * np.pi * 1e6 / 1500.0) < 1e-6


def test_wavenumber_rejects_nonpositive_omega():
    med = water_medium(make_grid(16, 0.01))
    with pytest.raises(ConfigError):
        dispersion_wavenumber(med, (0.0, 0.0), 0.0)


# ---------------------------------------------------------------------------
# Medium


def test_medium_rejects_out_of_band_speed():
    grid = make_grid(10, 0.01)
    lo, hi = SOUND_SPEED_BAND
    for c in (lo - 1.0, hi + 1.0):
        with pytest.raises(ConfigError):
            Medium(ScalarField(grid, np.full(grid.shape, c)), None, 2.0, 1500.0)


def test_medium_band_edges_accepted():
    grid = make_grid(10, 0.01)
    lo, hi = SOUND_SPEED_BAND
    Medium(ScalarField(grid, np.full(grid.shape, lo)), None, 2.0, 1500.0)
    Medium(ScalarField(grid, np.full(grid.shape, hi)), None, 2.0, 1500.0)


def test_medium_rejects_negative_alpha0():
    grid = make_grid(10, 0.01)
    c = ScalarField(grid, np.full(grid.shape, 1500.0))
    with pytest.raises(ConfigError):
        Medium(c, ScalarField(grid, np.full(grid.shape, -1e-12)), 2.0, 1500.0)


def test_slowness_spline_consistency():
    """k * c(x) / omega == 1 for lossless media at arbitrary points (point
    speed is defined through the slowness spline)."""
    grid = desk_grid(32, clearance=0.3)
    rng = np.random.default_rng(5)
    c = 1500.0 + 50.0 * rng.standard_normal(grid.shape)
    med = Medium(ScalarField(grid, c), None, 2.0, 1500.0)
    (lo1, hi1), (lo2, hi2) = grid.interior_bounds()
    pts = np.column_stack([rng.uniform(lo1, hi1, 64), rng.uniform(lo2, hi2, 64)])
    slow, _ = med.geometry_fields(1)
    w = 2 * np.pi * 1e6
    for p in pts[:8]:
        k = w * slow.eval(p)
        c_at = med.sound_speed_at(p)
        assert abs(k * c_at / w - 1.0) < 1e-12


def test_geometry_fields_smoothing_cached():
    med = water_medium(make_grid(16, 0.01))
    a = med.geometry_fields(7)
    b = med.geometry_fields(7)
    assert a[0] is b[0]


# ---------------------------------------------------------------------------
# phantoms


def test_phantom_background_exact_and_inclusion_value():
    grid = desk_grid(64)
    med = make_phantom(grid, 1500.0, 1.4, [
        EllipseInclusion(center=(0.01, -0.005), semi_axes=(0.02, 0.02),
                         speed=1560.0)])
    c = med.sound_speed.coefficients
    # far corner is pure background
    assert c[3, 3] == 1500.0
    # center of the inclusion carries the inclusion speed
    a1, a2 = grid.axes()
    i = np.argmin(np.abs(a1 - 0.01))
    j = np.argmin(np.abs(a2 - (-0.005)))
    assert abs(c[i, j] - 1560.0) < 1e-9


def test_phantom_rejects_inclusion_reaching_boundary():
    grid = desk_grid(32, clearance=0.3)
    with pytest.raises(ConfigError):
        make_phantom(grid, 1500.0, 2.0, [
            EllipseInclusion(center=(0.1, 0.0), semi_axes=(0.05, 0.05),
                             speed=1550.0)])


def test_phantom_soft_edge_monotone():
    grid = desk_grid(128)
    med = make_phantom(grid, 1500.0, 2.0, [
        EllipseInclusion(center=(0.0, 0.0), semi_axes=(0.03, 0.03),
                         speed=1560.0, edge_width=0.006)])
    c = med.sound_speed.coefficients
    mid = grid.shape[1] // 2
    profile = c[:, mid]
    center = grid.shape[0] // 2
    # outward from the center the profile never increases
    outward = profile[center:]
    assert (np.diff(outward) <= 1e-9).all()


def test_presets_stay_in_documented_bands():
    grid = desk_grid(96)
    for name in ("disc", "ellipse"):
        med = phantom_preset(name, grid)
        c = med.sound_speed.coefficients
        assert c.min() >= 1470.0 - 1e-9 and c.max() <= 1580.0 + 1e-9
        a_db = alpha0_internal_to_db(med.alpha0.coefficients, med.power_y)
        assert a_db.min() >= -1e-12 and a_db.max() <= 1.0 + 1e-9


def test_preset_unknown_name():
    with pytest.raises(ConfigError):
        phantom_preset("nope", desk_grid(32, clearance=0.3))


# ---------------------------------------------------------------------------
# transducer ring


def test_ring_positions_on_circle():
    ring = TransducerRing.regular(16, 64, radius=0.095)
    for arr in (ring.emitters, ring.receivers):
        r = np.hypot(arr[:, 0], arr[:, 1])
        assert np.abs(r - 0.095).max() < 1e-12


def test_ring_receivers_offset_from_emitters():
    ring = TransducerRing.regular(8, 8, radius=0.1)
    d = np.linalg.norm(ring.emitters[:, None, :] - ring.receivers[None, :, :],
                       axis=-1)
    assert d.min() > 1e-3  # no receiver coincides with an emitter


def test_ring_rejects_off_circle_points():
    with pytest.raises(ConfigError):
        TransducerRing(center=(0.0, 0.0), radius=0.1,
                       emitters=np.array([[0.1, 0.0], [0.0, 0.11]]),
                       receivers=np.array([[0.0, 0.1]]))


def test_ring_must_fit_inside_grid():
    ring = TransducerRing.regular(8, 8, radius=0.095)
    with pytest.raises(ConfigError):
        ring.check_inside(make_grid(16, 0.005))  # grid too small
