"""Ray tracing and two-point linking against closed-form geometry.

Oracles: straight chords in homogeneous water, circular arcs in a
constant-gradient medium (radius c/|grad c| from the ray-bending invariant),
and Fermat reciprocity of the acoustic length.
"""

import numpy as np
import pytest

from raytomo import (
    EllipseInclusion,
    LinkConfig,
    Medium,
    ScalarField,
    TransducerRing,
    acoustic_length,
    desk_grid,
    link_all,
    link_ray,
    make_phantom,
    trace_ray,
    water_medium,
)

OMEGA = 2 * np.pi * 1.0e6


def test_water_ray_is_straight(water64, ring_small):
    start = ring_small.emitters[0]
    direction = -start / np.hypot(*start)  # through the center
    theta = np.arctan2(direction[1], direction[0])
    ray = trace_ray(water64, OMEGA, start, theta, water64.grid.spacing,
                    ring_small)
    # every point sits on the start + s * direction line
    rel = ray.points - start
    cross = rel[:, 0] * direction[1] - rel[:, 1] * direction[0]
    assert np.abs(cross).max() < 1e-12 * ray.length
    assert np.allclose(ray.exit_direction, direction, atol=1e-12)
    # diameter chord: length matches 2 R to within the last step
    assert abs(ray.length - 2 * ring_small.radius) < 2 * ray.ds


def test_water_ray_arc_is_uniform(water64, ring_small):
    start = ring_small.emitters[2]
    theta = np.arctan2(-start[1], -start[0]) + 0.3
    ray = trace_ray(water64, OMEGA, start, theta, water64.grid.spacing,
                    ring_small)
    seg = np.diff(ray.arc)
    assert np.allclose(seg[:-1], ray.ds, rtol=1e-12)
    assert np.allclose(ray.k_samples, OMEGA / 1500.0, rtol=1e-12)


def _gradient_medium(grad):
    """c = c0 + grad * y, exactly representable by the cubic spline basis."""
    grid = desk_grid(64, ring_radius=0.095, clearance=0.6)
    pts = grid.node_points()
    c = 1500.0 + grad * pts[:, 1]
    return Medium(ScalarField.from_node_values(grid, c.reshape(grid.shape)),
                  alpha0=None, power_y=2.0, c0=1500.0)


def _arc_endpoint(start, theta, grad, c0_at, s):
    """Analytic circular-arc point after arc length s.

    For c = c0 + g y the ray invariant cos(angle to x-axis)/c is constant,
    the path is a circle of radius 1/(p g) centered on the c = 0 line.
    """
    d0 = np.array([np.cos(theta), np.sin(theta)])
    p = d0[0] / c0_at
    radius = 1.0 / (p * grad)
    center = start + radius * np.array([d0[1], -d0[0]])
    phi0 = np.arctan2(start[1] - center[1], start[0] - center[0])
    # rotation sense that reproduces d0 at s = 0
    for sign in (+1.0, -1.0):
        tangent = sign * np.array([-np.sin(phi0), np.cos(phi0)])
        if np.dot(tangent, d0) > 0.99:
            phi = phi0 + sign * s / abs(radius) * np.sign(radius)
            return center + abs(radius) * np.array([np.cos(phi), np.sin(phi)])
    raise AssertionError("no rotation sense matched the launch direction")


def test_constant_gradient_ray_converges_to_arc_at_second_order():
    grad = 1200.0
    medium = _gradient_medium(grad)
    ring = TransducerRing.regular(4, 4, radius=0.09)
    start = np.array([-0.085, 0.0])
    theta = 0.35
    c_start = 1500.0 + grad * start[1]
    s_ref = 0.12
    errors = []
    steps = [2.4e-3, 1.2e-3, 0.6e-3, 0.3e-3]
    for ds in steps:
        ray = trace_ray(medium, OMEGA, start, theta, ds, ring)
        n = int(np.floor(s_ref / ds))
        assert ray.arc[n] <= s_ref < ray.length
        exact = _arc_endpoint(start, theta, grad, c_start, ray.arc[n])
        errors.append(np.hypot(*(ray.points[n] - exact)))
    slopes = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert slopes.shape == (3,)
    assert np.all(np.abs(slopes - 2.0) < 0.2), (errors, slopes)


def test_linking_water_reproduces_straight_angles(water64, ring_small):
    cfg = LinkConfig(ds=water64.grid.spacing,
                     tol=1e-4 * water64.grid.spacing)
    linked = link_all(water64, OMEGA, ring_small, cfg)
    assert linked.n_failed == 0
    for e in range(ring_small.n_emitters):
        for r in range(ring_small.n_receivers):
            chord = ring_small.receivers[r] - ring_small.emitters[e]
            theta = np.arctan2(chord[1], chord[0])
            spread = np.angle(np.exp(1j * (linked.angles[e, r] - theta)))
            assert abs(spread) < 1e-6


def test_linking_inclusion_hits_receivers(blob64, ring_small):
    spacing = blob64.grid.spacing
    cfg = LinkConfig(ds=spacing, tol=spacing / 10, smoothing_window=7)
    linked = link_all(blob64, OMEGA, ring_small, cfg)
    assert linked.n_failed == 0
    assert np.nanmax(np.abs(linked.miss)) < spacing / 10
    for (e, r) in linked.pairs():
        end = linked.rays[(e, r)].points[-1]
        assert np.hypot(*(end - ring_small.receivers[r])) < spacing / 10


def test_warm_start_needs_fewer_traces(blob64, ring_small):
    spacing = blob64.grid.spacing
    cfg = LinkConfig(ds=spacing, tol=1e-4 * spacing, smoothing_window=7)
    cold = link_all(blob64, OMEGA, ring_small, cfg)
    warm = link_all(blob64, OMEGA * 1.1, ring_small, cfg, warm=cold)
    assert warm.n_failed == 0
    assert warm.n_traces < cold.n_traces


def test_acoustic_length_reciprocity(blob64):
    cfg = LinkConfig(ds=blob64.grid.spacing, tol=1e-5 * blob64.grid.spacing,
                     smoothing_window=7)
    ring = TransducerRing.regular(2, 2, radius=0.09)
    a = np.array([0.09, 0.0])
    b = np.array([-0.063, 0.063])
    fwd = link_ray(blob64, OMEGA, a, b, cfg)
    rev = link_ray(blob64, OMEGA, b, a, cfg)
    lf, lr = acoustic_length(fwd), acoustic_length(rev)
    assert abs(lf - lr) / lf < 1e-6


def test_ray_leaving_domain_raises(water64, ring_small):
    # launch outward: the ray exits the ring circle immediately
    start = ring_small.emitters[0]
    theta = np.arctan2(start[1], start[0])
    ray = trace_ray(water64, OMEGA, start, theta, water64.grid.spacing,
                    ring_small)
    assert ray.length < 3 * water64.grid.spacing


def test_link_failure_reports_pair(water64):
    ring = TransducerRing.regular(2, 2, radius=0.09)
    cfg = LinkConfig(ds=water64.grid.spacing, tol=1e-15,
                     max_secant=1, method="secant", max_fail_fraction=0.0)
    with pytest.raises(Exception) as err:
        link_all(water64, OMEGA, ring, cfg)
    assert "failed to link" in str(err.value) or "pairs" in str(err.value)
