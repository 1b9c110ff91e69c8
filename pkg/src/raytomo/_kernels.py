"""Numba kernels: cubic B-spline surface evaluation and the ray stepper.

Everything here works on plain float64 arrays; the dataclasses in grids.py /
rays.py own validation and bookkeeping. Cell indices are clamped to the
evaluable band [1, n-3] so the tracer's predictor stage may poke up to one
cell past the transducer ring without faulting; public evaluation APIs
enforce the stricter 2-cell interior margin before calling in.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _basis(u):
    """Cubic B-spline weights and du-derivatives for control points i-1..i+2."""
    u2 = u * u
    u3 = u2 * u
    w0 = (-u3 + 3.0 * u2 - 3.0 * u + 1.0) / 6.0
    w1 = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
    w2 = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
    w3 = u3 / 6.0
    d0 = (-3.0 * u2 + 6.0 * u - 3.0) / 6.0
    d1 = (9.0 * u2 - 12.0 * u) / 6.0
    d2 = (-9.0 * u2 + 6.0 * u + 3.0) / 6.0
    d3 = (3.0 * u2) / 6.0
    return w0, w1, w2, w3, d0, d1, d2, d3


@njit(cache=True, inline="always")
def _eval(coeffs, o1, o2, inv_h, n1, n2, x1, x2):
    t1 = (x1 - o1) * inv_h
    t2 = (x2 - o2) * inv_h
    i = int(np.floor(t1))
    j = int(np.floor(t2))
    if i < 1:
        i = 1
    elif i > n1 - 3:
        i = n1 - 3
    if j < 1:
        j = 1
    elif j > n2 - 3:
        j = n2 - 3
    u = t1 - i
    v = t2 - j
    w0, w1, w2, w3, du0, du1, du2, du3 = _basis(u)
    z0, z1, z2, z3, dv0, dv1, dv2, dv3 = _basis(v)

    a0 = coeffs[i - 1, j - 1]
    a1 = coeffs[i - 1, j]
    a2 = coeffs[i - 1, j + 1]
    a3 = coeffs[i - 1, j + 2]
    b0 = coeffs[i, j - 1]
    b1 = coeffs[i, j]
    b2 = coeffs[i, j + 1]
    b3 = coeffs[i, j + 2]
    c0 = coeffs[i + 1, j - 1]
    c1 = coeffs[i + 1, j]
    c2 = coeffs[i + 1, j + 1]
    c3 = coeffs[i + 1, j + 2]
    d0 = coeffs[i + 2, j - 1]
    d1 = coeffs[i + 2, j]
    d2 = coeffs[i + 2, j + 1]
    d3 = coeffs[i + 2, j + 2]

    ra = a0 * z0 + a1 * z1 + a2 * z2 + a3 * z3
    rb = b0 * z0 + b1 * z1 + b2 * z2 + b3 * z3
    rc = c0 * z0 + c1 * z1 + c2 * z2 + c3 * z3
    rd = d0 * z0 + d1 * z1 + d2 * z2 + d3 * z3
    sa = a0 * dv0 + a1 * dv1 + a2 * dv2 + a3 * dv3
    sb = b0 * dv0 + b1 * dv1 + b2 * dv2 + b3 * dv3
    sc = c0 * dv0 + c1 * dv1 + c2 * dv2 + c3 * dv3
    sd = d0 * dv0 + d1 * dv1 + d2 * dv2 + d3 * dv3

    value = w0 * ra + w1 * rb + w2 * rc + w3 * rd
    g1 = (du0 * ra + du1 * rb + du2 * rc + du3 * rd) * inv_h
    g2 = (w0 * sa + w1 * sb + w2 * sc + w3 * sd) * inv_h
    return value, g1, g2


@njit(cache=True)
def eval_point(coeffs, o1, o2, inv_h, n1, n2, x1, x2):
    return _eval(coeffs, o1, o2, inv_h, n1, n2, x1, x2)


@njit(cache=True)
def eval_many(coeffs, o1, o2, inv_h, n1, n2, pts, out_v, out_g, with_grad):
    for n in range(pts.shape[0]):
        v, g1, g2 = _eval(coeffs, o1, o2, inv_h, n1, n2, pts[n, 0], pts[n, 1])
        out_v[n] = v
        if with_grad:
            out_g[n, 0] = g1
            out_g[n, 1] = g2


@njit(cache=True, inline="always")
def _k_and_grad(slow, a0, has_a0, o1, o2, inv_h, n1, n2, omega, wfac, x1, x2):
    """Wavenumber k = omega*slowness + wfac*alpha0 and its gradient."""
    s, s1, s2 = _eval(slow, o1, o2, inv_h, n1, n2, x1, x2)
    k = omega * s
    g1 = omega * s1
    g2 = omega * s2
    if has_a0:
        a, a1, a2 = _eval(a0, o1, o2, inv_h, n1, n2, x1, x2)
        k += wfac * a
        g1 += wfac * a1
        g2 += wfac * a2
    return k, g1, g2


@njit(cache=True)
def trace(slow, a0, has_a0, o1, o2, inv_h, n1, n2, omega, wfac,
          x1, x2, theta0, ds, first_step, cx, cy, radius2, max_steps, out):
    """Two-stage (predictor/corrector) integration of dx/ds = kappa/k,
    dkappa/ds = grad k, with |kappa| renormalized to k at both stages and the
    averaged position step renormalized to unit speed.

    Integration starts at (x1, x2) with take-off angle theta0 and stops at the
    first point outside the circle (cx, cy, radius2), which is pulled back
    onto the circle by shortening the last step. `out` must have room for
    max_steps + 1 points. Returns (npts, ds_last, status); status 0 means the
    ray exited, 1 means max_steps was exhausted inside the circle. npts is the
    last point index (points occupy out[0..npts]).
    """
    k, _, _ = _k_and_grad(slow, a0, has_a0, o1, o2, inv_h, n1, n2, omega, wfac, x1, x2)
    ka1 = k * np.cos(theta0)
    ka2 = k * np.sin(theta0)
    out[0, 0] = x1
    out[0, 1] = x2
    m = 0
    while m < max_steps:
        h = first_step if m == 0 else ds
        k1, g11, g12 = _k_and_grad(slow, a0, has_a0, o1, o2, inv_h, n1, n2,
                                   omega, wfac, x1, x2)
        norm = np.sqrt(ka1 * ka1 + ka2 * ka2)
        ka1 *= k1 / norm
        ka2 *= k1 / norm
        q1x = ka1 / k1
        q1y = ka2 / k1
        xp1 = x1 + h * q1x
        xp2 = x2 + h * q1y
        kp1 = ka1 + h * g11
        kp2 = ka2 + h * g12
        k2, g21, g22 = _k_and_grad(slow, a0, has_a0, o1, o2, inv_h, n1, n2,
                                   omega, wfac, xp1, xp2)
        norm = np.sqrt(kp1 * kp1 + kp2 * kp2)
        kp1 *= k2 / norm
        kp2 *= k2 / norm
        q2x = kp1 / k2
        q2y = kp2 / k2
        dx = 0.5 * (q1x + q2x)
        dy = 0.5 * (q1y + q2y)
        norm = np.sqrt(dx * dx + dy * dy)
        dx /= norm
        dy /= norm
        nx1 = x1 + h * dx
        nx2 = x2 + h * dy
        ka1 += 0.5 * h * (g11 + g21)
        ka2 += 0.5 * h * (g12 + g22)
        m += 1
        e1 = nx1 - cx
        e2 = nx2 - cy
        if e1 * e1 + e2 * e2 > radius2:
            p1 = x1 - cx
            p2 = x2 - cy
            b = p1 * dx + p2 * dy
            c = p1 * p1 + p2 * p2 - radius2
            disc = b * b - c
            if disc < 0.0:
                disc = 0.0
            t = -b + np.sqrt(disc)
            if t < 0.0:
                t = 0.0
            elif t > h:
                t = h
            out[m, 0] = x1 + t * dx
            out[m, 1] = x2 + t * dy
            return m, t, 0
        out[m, 0] = nx1
        out[m, 1] = nx2
        x1 = nx1
        x2 = nx2
    return m, ds, 1
