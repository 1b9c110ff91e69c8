"""Ray-approximated Green's functions and the single-scattering forward model.

Along a ray the Green's function is g ~ A * exp(i(phi + pi/4)) with

    phi(s)   = int_0^s k ds'  +  (pi/2) * K(s)          (K = caustic counter)
    A(s)     = A_abs(s) * A_geom(s)
    A_abs(s) = exp(-int_0^s alpha ds')
    A_geom   = sqrt(c(s)/c(s_ref) * J(s_ref)/J(s)), anchored so that
               A_geom(s_ref) equals the homogeneous 2D amplitude
               (8 pi k(x_0) s_ref)^(-1/2) at the first point after emission.

J is the geometric-spreading Jacobian det[dx/dtheta0, dx/ds], estimated from
two auxiliary rays traced at theta0 +- delta_theta. The 2D homogeneous
asymptotic form (8 pi phi0)^(-1/2) exp(i(phi0 + pi/4)) is good for
k0 r >~ 20; the exact reference is (i/4) H0^(1)(k0 r). (The 3D counterpart,
exp(i k0 r) / (4 pi r), is recorded here for reference only; nothing in this
package uses it.)

All phase/absorption integrals use the unsmoothed field samples stored on the
rays; only the traced geometry sees the smoothed maps. Because
k = omega/c + tan(pi y/2) alpha0 omega^y is linear in (omega, omega^y) at
fixed geometry, each ray reduces to two cumulative integrals (travel time and
absorption moment) from which any frequency's phase and attenuation follow in
closed form; the multi-frequency forward model exploits that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .grids import ConfigError
from .medium import Medium, TransducerRing
from .rays import LinkedRaySet, Ray, _Tracer, _trapz

__all__ = [
    "RayGreens",
    "SourceSpectrum",
    "SpectraSet",
    "accumulate_absorption",
    "accumulate_phase",
    "amp_geometric",
    "caustic_counts",
    "forward_model",
    "greens_along_ray",
    "greens_from_receiver",
    "greens_homogeneous_2d",
    "pair_tables",
    "ray_jacobian",
    "reversed_ray",
]

JACOBIAN_FLOOR = 1e-6  # |J| floor, relative to |J(s_ref)|, at caustic touches


def greens_homogeneous_2d(omega: float, x, x_src, c0: float) -> complex:
    """Asymptotic homogeneous 2D Green's function A0 * exp(i(phi0 + pi/4))."""
    r = float(np.hypot(x[0] - x_src[0], x[1] - x_src[1]))
    if r <= 0:
        raise ConfigError("source and evaluation point coincide")
    if omega <= 0 or c0 <= 0:
        raise ConfigError("omega and c0 must be positive")
    phi0 = (omega / c0) * r
    return (8.0 * np.pi * phi0) ** -0.5 * np.exp(1j * (phi0 + 0.25 * np.pi))


def caustic_counts(jacobian) -> np.ndarray:
    """Cumulative count of sign changes of J along the ray (zeros are carried)."""
    s = np.sign(np.asarray(jacobian, dtype=float))
    idx = np.where(s != 0, np.arange(len(s)), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = s[idx]  # each entry: last nonzero sign so far (0 until the first)
    changes = np.zeros(len(s))
    if len(s) > 1:
        changes[1:] = (filled[1:] != filled[:-1]) & (filled[:-1] != 0) & (filled[1:] != 0)
    return np.cumsum(changes).astype(np.int64)


def accumulate_phase(ray: Ray, medium: Medium, omega: float | None = None,
                     jacobian=None) -> np.ndarray:
    """Cumulative phase along the ray: trapezoidal int k ds plus pi/2 per
    Jacobian sign change (pass `jacobian` to include the caustic term)."""
    w = ray.omega if omega is None else float(omega)
    tau = cumulative_trapezoid(ray.slowness_samples, ray.arc, initial=0.0)
    a0c = cumulative_trapezoid(ray.alpha0_samples, ray.arc, initial=0.0)
    phase = w * tau + medium.tan_factor * w**medium.power_y * a0c
    if jacobian is not None:
        phase = phase + 0.5 * np.pi * caustic_counts(jacobian)
    return phase


def accumulate_absorption(ray: Ray, medium: Medium, omega: float | None = None
                          ) -> np.ndarray:
    """Cumulative absorption amplitude exp(-int alpha ds), 1 at the start."""
    w = ray.omega if omega is None else float(omega)
    a0c = cumulative_trapezoid(ray.alpha0_samples, ray.arc, initial=0.0)
    return np.exp(-(w**medium.power_y) * a0c)


def _sample_polyline(points, arc, s_values):
    """Positions along a polyline at arbitrary arc values.

    Linear interpolation between samples; beyond the last point the polyline
    is continued along its final segment (the auxiliary rays of a Jacobian may
    exit the ring slightly before the main ray does).
    """
    s = np.asarray(s_values, dtype=float)
    out = np.column_stack([np.interp(s, arc, points[:, 0]),
                           np.interp(s, arc, points[:, 1])])
    beyond = s > arc[-1]
    if beyond.any():
        seg = points[-1] - points[-2]
        seg = seg / np.hypot(*seg)
        out[beyond] = points[-1] + (s[beyond] - arc[-1])[:, None] * seg
    return out


def ray_jacobian(ray: Ray, aux_plus: Ray, aux_minus: Ray, delta_theta: float):
    """Geometric-spreading Jacobian J(s) = det[dx/dtheta, dx/ds] at the main
    ray's points, from two auxiliary rays traced at theta0 +- delta_theta.

    Returns (J, truncated); truncated is True when an auxiliary ray ended more
    than one step before the main ray, in which case the tail uses the
    auxiliary rays' extrapolated final segments.
    """
    if delta_theta <= 0:
        raise ConfigError("delta_theta must be positive")
    s = ray.arc
    p_plus = _sample_polyline(aux_plus.points, aux_plus.arc, s)
    p_minus = _sample_polyline(aux_minus.points, aux_minus.arc, s)
    dxdth = (p_plus - p_minus) / (2.0 * delta_theta)
    dxds = np.gradient(ray.points, s, axis=0)
    jac = dxdth[:, 0] * dxds[:, 1] - dxdth[:, 1] * dxds[:, 0]
    truncated = bool(min(aux_plus.arc[-1], aux_minus.arc[-1]) < s[-1] - ray.ds)
    return jac, truncated


def amp_geometric(jacobian, medium: Medium, ray: Ray, ref_index: int = 1
                  ) -> np.ndarray:
    """Geometric-spreading amplitude along the ray, anchored to the
    homogeneous analytic amplitude at the reference point (first point after
    emission). |J| is floored at 1e-6 of |J(ref)| across caustic touches."""
    jac = np.asarray(jacobian, dtype=float)
    j_ref = abs(jac[ref_index])
    if j_ref == 0:
        raise ConfigError("Jacobian vanishes at the reference point; cannot anchor")
    s_ref = ray.arc[ref_index]
    k_src = ray.k_samples[0]
    anchor = (8.0 * np.pi * k_src * s_ref) ** -0.5
    c = 1.0 / ray.slowness_samples
    j_abs = np.maximum(np.abs(jac), JACOBIAN_FLOOR * j_ref)
    amp = anchor * np.sqrt((c / c[ref_index]) * (j_ref / j_abs))
    amp[0] = amp[ref_index]  # J(0) = 0 at the emission point; use the anchor value
    return amp


@dataclass(frozen=True)
class RayGreens:
    """Green's-function samples along one ray at one frequency."""

    ray: Ray
    omega: float
    phase: np.ndarray          # int k ds + (pi/2) K  (pi/4 carrier not included)
    amp_abs: np.ndarray
    amp_geom: np.ndarray
    jacobian: np.ndarray
    caustic_count: np.ndarray
    truncated: bool = False

    def values(self) -> np.ndarray:
        """Complex Green's samples A_abs * A_geom * exp(i(phase + pi/4))."""
        return (self.amp_abs * self.amp_geom
                * np.exp(1j * (self.phase + 0.25 * np.pi)))


def _aux_pair(tracer: _Tracer, x_start, theta0, delta_theta, first_step=None):
    rays = []
    for sign in (+1.0, -1.0):
        pts, ds_last, ok = tracer.raw(x_start, theta0 + sign * delta_theta,
                                      first_step=first_step)
        if not ok:
            raise ConfigError("auxiliary ray did not exit the ring")
        rays.append(tracer.build_ray(pts, ds_last, theta0 + sign * delta_theta,
                                     first_step=first_step))
    return rays


def greens_along_ray(medium: Medium, ring: TransducerRing, ray: Ray,
                     smoothing_window: int = 1, delta_theta: float = 1e-4,
                     omega: float | None = None) -> RayGreens:
    """RayGreens for a traced/linked ray, tracing its two auxiliary rays."""
    w = ray.omega if omega is None else float(omega)
    tracer = _Tracer(medium, ray.omega, ring, ray.ds, smoothing_window)
    aux_p, aux_m = _aux_pair(tracer, ray.points[0], ray.theta0, delta_theta,
                             first_step=ray.arc[1])
    jac, truncated = ray_jacobian(ray, aux_p, aux_m, delta_theta)
    ref = _reference_index(ray)
    return RayGreens(
        ray=ray, omega=w,
        phase=accumulate_phase(ray, medium, w, jacobian=jac),
        amp_abs=accumulate_absorption(ray, medium, w),
        amp_geom=_amp_geometric_at(jac, medium, ray, w, ref),
        jacobian=jac, caustic_count=caustic_counts(jac), truncated=truncated)


def _reference_index(ray: Ray) -> int:
    # guard: a vanishing first step (receiver landed on a sample point) would
    # make the anchor 0/0; move one sample inward
    return 1 if ray.arc[1] > 1e-6 * ray.ds else 2


def _amp_geometric_at(jac, medium, ray, omega, ref_index):
    """amp_geometric with the anchor wavenumber evaluated at `omega` (which
    may differ from the ray's trace frequency)."""
    amp = amp_geometric(jac, medium, ray, ref_index)
    if omega != ray.omega:
        k_trace = ray.k_samples[0]
        wfac = medium.tan_factor * omega**medium.power_y
        k_at = omega * ray.slowness_samples[0] + wfac * ray.alpha0_samples[0]
        amp = amp * np.sqrt(k_trace / k_at)
    return amp


def reversed_ray(ray: Ray) -> Ray:
    """The same path parameterized from its far end (reciprocity)."""
    pts = ray.points[::-1].copy()
    n = len(pts)
    arc = np.empty(n)
    arc[0] = 0.0
    if n > 1:
        arc[1:] = np.cumsum(np.diff(ray.arc)[::-1])
    seg = pts[1] - pts[0]
    return Ray(points=pts, arc=arc, theta0=float(np.arctan2(seg[1], seg[0])),
               ds=ray.ds, ds_last=float(arc[-1] - arc[-2]) if n > 1 else 0.0,
               omega=ray.omega,
               slowness_samples=ray.slowness_samples[::-1].copy(),
               alpha0_samples=ray.alpha0_samples[::-1].copy(),
               k_samples=ray.k_samples[::-1].copy(), miss=ray.miss)


def greens_from_receiver(linked: LinkedRaySet, medium: Medium,
                         omega: float | None = None,
                         smoothing_window: int | None = None,
                         delta_theta: float = 1e-4) -> dict:
    """Receiver-side Green's functions g(x; x_r) along the linked rays.

    The linked paths are reused in reverse (rays are reciprocal); only the two
    auxiliary rays per pair are traced anew from the receiver, with a first
    step equal to the reversed ray's first (partial) segment so the arc grids
    line up. Returns {(e, r): RayGreens} with samples ordered from the
    receiver toward the emitter.
    """
    window = linked.smoothing_window if smoothing_window is None else smoothing_window
    tracer = _Tracer(medium, linked.omega, linked.ring, linked.ds, window)
    out = {}
    for (e, r) in linked.pairs():
        ray = reversed_ray(linked.rays[(e, r)])
        w = ray.omega if omega is None else float(omega)
        aux_p, aux_m = _aux_pair(tracer, ray.points[0], ray.theta0, delta_theta,
                                 first_step=ray.arc[1])
        jac, truncated = ray_jacobian(ray, aux_p, aux_m, delta_theta)
        ref = _reference_index(ray)
        out[(e, r)] = RayGreens(
            ray=ray, omega=w,
            phase=accumulate_phase(ray, medium, w, jacobian=jac),
            amp_abs=accumulate_absorption(ray, medium, w),
            amp_geom=_amp_geometric_at(jac, medium, ray, w, ref),
            jacobian=jac, caustic_count=caustic_counts(jac), truncated=truncated)
    return out


@dataclass(frozen=True)
class SourceSpectrum:
    """Gaussian-windowed tone burst: s(t) = a sin(2 pi f0 (t - t0)) *
    exp(-(t - t0)^2 / (2 sigma_t^2)), with the closed-form spectrum under the
    p(omega) = int p(t) exp(+i omega t) dt convention."""

    center_freq: float = 0.85e6
    sigma_t: float = 3.5e-7
    delay: float = 2.0e-6
    amplitude: float = 1.0

    def __call__(self, f_hz) -> np.ndarray:
        omega = 2.0 * np.pi * np.asarray(f_hz, dtype=float)
        w0 = 2.0 * np.pi * self.center_freq
        st = self.sigma_t
        gauss = lambda w: np.exp(-0.5 * (st * w) ** 2)
        base = 0.5j * self.amplitude * st * np.sqrt(2.0 * np.pi) * (
            gauss(omega - w0) - gauss(omega + w0))
        return base * np.exp(1j * omega * self.delay)

    def time_series(self, t) -> np.ndarray:
        u = np.asarray(t, dtype=float) - self.delay
        return (self.amplitude * np.sin(2.0 * np.pi * self.center_freq * u)
                * np.exp(-0.5 * (u / self.sigma_t) ** 2))


@dataclass
class SpectraSet:
    """Complex boundary spectra p(omega, r, e) with a per-entry validity mask."""

    frequencies: np.ndarray          # Hz, ascending within a file
    ring: TransducerRing
    values: np.ndarray               # (Nw, Nr, Ne) complex128
    mask: np.ndarray = None          # (Nw, Nr, Ne) bool
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.values = np.asarray(self.values, dtype=np.complex128)
        nw, nr, ne = (len(self.frequencies), self.ring.n_receivers,
                      self.ring.n_emitters)
        if self.values.shape != (nw, nr, ne):
            raise ConfigError(
                f"spectra shape {self.values.shape} != {(nw, nr, ne)}")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ConfigError("mask shape differs from values shape")

    def select(self, freq_indices) -> "SpectraSet":
        idx = np.asarray(freq_indices)
        return SpectraSet(self.frequencies[idx], self.ring,
                          self.values[idx], self.mask[idx],
                          provenance=dict(self.provenance))


@dataclass(frozen=True)
class PairTable:
    """Frequency-separable per-pair ray integrals (see module docstring)."""

    tau: float        # int ds / c, emitter to receiver
    a0int: float      # int alpha0 ds
    s_src: float      # slowness at the emitter
    a0_src: float     # alpha0 at the emitter
    s_ref: float      # arc length of the anchor point
    r_end: float      # sqrt(c_end/c_ref * J_ref/J_end), >= 0
    k_end: int        # caustic count at the receiver
    length: float


def pair_tables(medium: Medium, linked: LinkedRaySet,
                delta_theta: float = 1e-4) -> dict:
    """{(e, r): PairTable} for every successfully linked pair."""
    tracer = _Tracer(medium, linked.omega, linked.ring, linked.ds,
                     linked.smoothing_window)
    out = {}
    for (e, r) in linked.pairs():
        ray = linked.rays[(e, r)]
        aux_p, aux_m = _aux_pair(tracer, ray.points[0], ray.theta0, delta_theta)
        jac, _ = ray_jacobian(ray, aux_p, aux_m, delta_theta)
        ref = _reference_index(ray)
        j_ref = abs(jac[ref])
        if j_ref == 0:
            raise ConfigError(f"Jacobian vanishes at the anchor of pair {(e, r)}")
        c = 1.0 / ray.slowness_samples
        j_end = max(abs(jac[-1]), JACOBIAN_FLOOR * j_ref)
        out[(e, r)] = PairTable(
            tau=float(_trapz(ray.slowness_samples, ray.arc)),
            a0int=float(_trapz(ray.alpha0_samples, ray.arc)),
            s_src=float(ray.slowness_samples[0]),
            a0_src=float(ray.alpha0_samples[0]),
            s_ref=float(ray.arc[ref]),
            r_end=float(np.sqrt((c[-1] / c[ref]) * (j_ref / j_end))),
            k_end=int(caustic_counts(jac)[-1]),
            length=float(ray.arc[-1]))
    return out


def spectra_from_tables(tables: dict, medium: Medium, ring: TransducerRing,
                        source: SourceSpectrum, frequencies) -> SpectraSet:
    """Assemble p(omega, r, e) from per-pair tables at arbitrary frequencies."""
    freqs = np.atleast_1d(np.asarray(frequencies, dtype=float))
    omegas = 2.0 * np.pi * freqs
    y = medium.power_y
    tanfac = medium.tan_factor
    wy = omegas**y
    s_of_f = np.asarray(source(freqs), dtype=np.complex128)
    values = np.zeros((len(freqs), ring.n_receivers, ring.n_emitters),
                      dtype=np.complex128)
    mask = np.zeros(values.shape, dtype=bool)
    for (e, r), tb in tables.items():
        k_src = omegas * tb.s_src + tanfac * wy * tb.a0_src
        amp = ((8.0 * np.pi * k_src * tb.s_ref) ** -0.5 * tb.r_end
               * np.exp(-wy * tb.a0int))
        phase = (omegas * tb.tau + tanfac * wy * tb.a0int
                 + 0.5 * np.pi * tb.k_end + 0.25 * np.pi)
        values[:, r, e] = amp * np.exp(1j * phase) * s_of_f
        mask[:, r, e] = True
    return SpectraSet(freqs, ring, values, mask)


def forward_model(medium: Medium, ring: TransducerRing, source: SourceSpectrum,
                  linked: LinkedRaySet, frequencies,
                  delta_theta: float = 1e-4) -> SpectraSet:
    """Modelled boundary spectra over the linked rays at the given
    frequencies (Hz). Pairs missing from `linked` are masked out."""
    tables = pair_tables(medium, linked, delta_theta)
    return spectra_from_tables(tables, medium, ring, source, frequencies)
