"""Ray tracing in the heterogeneous wavenumber field and two-point linking.

Rays solve dx/ds = kappa/k, dkappa/ds = grad k with a two-stage
predictor/corrector step that renormalizes |kappa| = k at both stages; the
averaged position step is renormalized so every interior segment has length
exactly ds (unit-speed parameterization). A ray ends at its first point
outside the transducer ring; the final partial step lands exactly on the
circle, and linked rays snap that point onto the receiver.

Geometry is traced on the smoothed wavenumber field; the per-point slowness
and absorption samples stored on the Ray come from the unsmoothed maps, and
all path integrals downstream use those samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .grids import ConfigError, DomainError
from .medium import Medium, TransducerRing

__all__ = [
    "LinkConfig",
    "LinkFailure",
    "LinkedRaySet",
    "Ray",
    "acoustic_length",
    "link_all",
    "link_ray",
    "trace_ray",
]

_trapz = getattr(np, "trapezoid", None) or np.trapz


class LinkFailure(RuntimeError):
    """Two-point linking did not reach the requested miss tolerance."""

    def __init__(self, message, theta=None, miss=None):
        super().__init__(message)
        self.theta = theta
        self.miss = miss


@dataclass(frozen=True)
class Ray:
    """One traced ray: points, arc lengths, and unsmoothed field samples."""

    points: np.ndarray            # (M+1, 2)
    arc: np.ndarray               # (M+1,) cumulative arc length
    theta0: float
    ds: float
    ds_last: float
    omega: float
    slowness_samples: np.ndarray  # 1/c at the ray points (unsmoothed map)
    alpha0_samples: np.ndarray    # absorption prefactor at the ray points
    k_samples: np.ndarray         # real wavenumber at the trace frequency
    miss: float = 0.0             # signed ring-arc miss before the final snap

    def __post_init__(self):
        for name in ("points", "arc", "slowness_samples", "alpha0_samples", "k_samples"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_points(self):
        return len(self.points)

    @property
    def length(self):
        return float(self.arc[-1])

    @property
    def exit_direction(self):
        seg = self.points[-1] - self.points[-2]
        return seg / np.hypot(*seg)


class _Tracer:
    """Bundles kernel arguments for repeated traces of one (medium, omega, window)."""

    def __init__(self, medium: Medium, omega: float, ring: TransducerRing,
                 ds: float, smoothing_window: int = 1):
        if ds <= 0:
            raise ConfigError(f"step must be positive, got {ds}")
        if omega <= 0:
            raise ConfigError(f"omega must be positive, got {omega}")
        ring.check_inside(medium.grid)
        slow_f, a0_f = medium.geometry_fields(smoothing_window)
        g = medium.grid
        self.medium = medium
        self.omega = float(omega)
        self.ds = float(ds)
        self.ring = ring
        wfac = medium.tan_factor * omega**medium.power_y
        self._args = (slow_f.coefficients, a0_f.coefficients,
                      medium.has_absorption, g.origin[0], g.origin[1],
                      1.0 / g.spacing, g.shape[0], g.shape[1], self.omega, wfac)
        self._ring_args = (ring.center[0], ring.center[1], ring.radius**2)
        self.max_steps = int(np.ceil(6.0 * ring.radius / ds)) + 16
        self._buf = np.empty((self.max_steps + 1, 2))

    def raw(self, x_start, theta0, first_step=None):
        """Trace and return (points_view, ds_last, ok). The view aliases an
        internal buffer and must be copied before the next trace."""
        h0 = self.ds if first_step is None else float(first_step)
        m, ds_last, status = _kernels.trace(
            *self._args, float(x_start[0]), float(x_start[1]), float(theta0),
            self.ds, h0, *self._ring_args, self.max_steps, self._buf)
        return self._buf[: m + 1], ds_last, status == 0

    def arc_array(self, n_points, ds_last, first_step=None):
        h0 = self.ds if first_step is None else float(first_step)
        arc = np.empty(n_points)
        arc[0] = 0.0
        if n_points > 1:
            arc[1] = h0
            if n_points > 2:
                arc[2:] = h0 + self.ds * np.arange(1, n_points - 1)
            arc[-1] = arc[-2] + ds_last
        return arc

    def build_ray(self, points, ds_last, theta0, miss=0.0, first_step=None):
        # always copy: `points` may alias the shared trace buffer
        pts = np.array(points, dtype=np.float64)
        arc = self.arc_array(len(pts), ds_last, first_step)
        slow = self.medium.slowness.eval_many(pts)
        a0 = self.medium.alpha0.eval_many(pts)
        wfac = self.medium.tan_factor * self.omega**self.medium.power_y
        k = self.omega * slow + wfac * a0
        return Ray(points=pts, arc=arc, theta0=float(theta0), ds=self.ds,
                   ds_last=float(ds_last), omega=self.omega,
                   slowness_samples=slow, alpha0_samples=a0, k_samples=k,
                   miss=float(miss))


def trace_ray(medium: Medium, omega: float, x_start, theta0: float, step: float,
              ring: TransducerRing, smoothing_window: int = 1,
              first_step=None) -> Ray:
    """Trace a single ray from x_start until it exits the ring circle."""
    tracer = _Tracer(medium, omega, ring, step, smoothing_window)
    pts, ds_last, ok = tracer.raw(x_start, theta0, first_step)
    if not ok:
        raise DomainError(
            f"ray from {tuple(np.round(x_start, 4))} at theta0={theta0:.4f} "
            f"did not exit the ring within {tracer.max_steps} steps")
    return tracer.build_ray(pts, ds_last, theta0, first_step=first_step)


@dataclass(frozen=True)
class LinkConfig:
    """Two-point linking controls.

    tol is the ring-arc miss tolerance in meters. The secant method warm-starts
    from a previous angle and clamps each update to secant_clamp; regula falsi
    (Illinois variant) brackets the straight-line angle by +-bracket.
    """

    ds: float
    tol: float
    smoothing_window: int = 1
    method: str = "secant"
    max_secant: int = 12
    secant_clamp: float = np.radians(5.0)
    bracket: float = np.radians(20.0)
    sweep: int = 9
    max_regula: int = 60
    max_fail_fraction: float = 0.01
    delta_theta: float = 1e-4

    def __post_init__(self):
        if self.method not in ("secant", "regula-falsi"):
            raise ConfigError(f"unknown linking method {self.method!r}")
        if self.tol <= 0 or self.ds <= 0:
            raise ConfigError("tol and ds must be positive")


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


class _LinkWorker:
    """Root-finds the take-off angle for one emitter against many receivers."""

    def __init__(self, tracer: _Tracer, cfg: LinkConfig, x_e):
        self.tracer = tracer
        self.cfg = cfg
        self.x_e = np.asarray(x_e, dtype=float)
        self.ring = tracer.ring
        self.n_traces = 0

    def _miss(self, theta, psi_target):
        pts, ds_last, ok = self.tracer.raw(self.x_e, theta)
        self.n_traces += 1
        if not ok or len(pts) < 2:
            return np.nan, None, ds_last
        exit_pt = pts[-1]
        psi = np.arctan2(exit_pt[1] - self.ring.center[1],
                         exit_pt[0] - self.ring.center[0])
        miss = self.ring.radius * _wrap_angle(psi - psi_target)
        return miss, pts, ds_last

    def link(self, x_r, theta_init=None):
        """Returns (points, ds_last, theta, miss, n_traces_used) or raises LinkFailure."""
        cfg = self.cfg
        x_r = np.asarray(x_r, dtype=float)
        psi_target = np.arctan2(x_r[1] - self.ring.center[1],
                                x_r[0] - self.ring.center[0])
        chord = x_r - self.x_e
        dist = np.hypot(*chord)
        if dist <= 0:
            raise ConfigError("emitter and receiver coincide")
        theta_straight = np.arctan2(chord[1], chord[0])
        traces_before = self.n_traces

        if cfg.method == "secant":
            theta_a = theta_straight if theta_init is None else float(theta_init)
            f_a, pts, ds_last = self._miss(theta_a, psi_target)
            if np.isfinite(f_a) and abs(f_a) < cfg.tol:
                return pts, ds_last, theta_a, f_a, self.n_traces - traces_before
            if np.isfinite(f_a):
                # seed the secant with a first-order guess: the exit point moves
                # along the ring roughly by the chord length per take-off radian
                step = np.clip(-f_a / dist, -cfg.secant_clamp, cfg.secant_clamp)
                theta_b = theta_a + (step if step != 0 else cfg.tol)
                f_b, pts, ds_last = self._miss(theta_b, psi_target)
                for _ in range(cfg.max_secant):
                    if not np.isfinite(f_b):
                        break
                    if abs(f_b) < cfg.tol:
                        return pts, ds_last, theta_b, f_b, self.n_traces - traces_before
                    denom = f_b - f_a
                    if denom == 0:
                        break
                    step = np.clip(-f_b * (theta_b - theta_a) / denom,
                                   -cfg.secant_clamp, cfg.secant_clamp)
                    theta_a, f_a = theta_b, f_b
                    theta_b = theta_b + step
                    f_b, pts, ds_last = self._miss(theta_b, psi_target)

        return self._regula(theta_straight, psi_target, traces_before)

    def _regula(self, theta_straight, psi_target, traces_before):
        cfg = self.cfg
        n_pts = cfg.sweep
        for _ in range(3):
            thetas = theta_straight + np.linspace(-cfg.bracket, cfg.bracket, n_pts)
            misses = np.empty(n_pts)
            for i, th in enumerate(thetas):
                misses[i], _, _ = self._miss(th, psi_target)
            ok = np.isfinite(misses)
            sign_change = ok[:-1] & ok[1:] & (np.sign(misses[:-1]) != np.sign(misses[1:]))
            if sign_change.any():
                # tightest bracket: smallest combined miss
                idx = np.flatnonzero(sign_change)
                i = idx[np.argmin(np.abs(misses[idx]) + np.abs(misses[idx + 1]))]
                lo, hi = thetas[i], thetas[i + 1]
                f_lo, f_hi = misses[i], misses[i + 1]
                return self._illinois(lo, hi, f_lo, f_hi, psi_target, traces_before)
            n_pts = 2 * n_pts - 1
        best = np.nan
        raise LinkFailure(
            f"no bracketing take-off angle within +-{np.degrees(cfg.bracket):.0f} deg "
            f"of the straight line", theta=theta_straight, miss=best)

    def _illinois(self, lo, hi, f_lo, f_hi, psi_target, traces_before):
        cfg = self.cfg
        pts = ds_last = None
        for _ in range(cfg.max_regula):
            theta = hi - f_hi * (hi - lo) / (f_hi - f_lo)
            f, pts, ds_last = self._miss(theta, psi_target)
            if not np.isfinite(f):
                raise LinkFailure("trapped ray inside bracket", theta=theta, miss=np.nan)
            if abs(f) < cfg.tol:
                return pts, ds_last, theta, f, self.n_traces - traces_before
            if np.sign(f) == np.sign(f_hi):
                hi, f_hi = theta, f
                f_lo *= 0.5  # Illinois: halve the stale endpoint to avoid stalling
            else:
                lo, f_lo = hi, f_hi
                hi, f_hi = theta, f
        raise LinkFailure(
            f"regula falsi did not converge below tol={cfg.tol:.2e}",
            theta=hi, miss=f_hi)


@dataclass
class LinkedRaySet:
    """Linked rays for every (emitter, receiver) pair of a ring.

    rays maps (e, r) index pairs to Ray objects; ok marks pairs that linked
    within tolerance. angles feed the warm start of the next call.
    """

    ring: TransducerRing
    omega: float
    ds: float
    rays: dict = field(repr=False, default_factory=dict)
    angles: np.ndarray = None
    miss: np.ndarray = None
    ok: np.ndarray = None
    smoothing_window: int = 1
    n_traces: int = 0
    n_updates: int = 0

    @property
    def n_failed(self):
        return int((~self.ok).sum())

    def pairs(self):
        """Valid (e, r) pairs in deterministic emitter-major order."""
        ne, nr = self.ok.shape
        return [(e, r) for e in range(ne) for r in range(nr) if self.ok[e, r]]


def link_ray(medium: Medium, omega: float, x_e, x_r, cfg: LinkConfig,
             ring: TransducerRing, theta_init=None) -> Ray:
    """Link one emitter/receiver pair; the returned ray ends exactly on x_r."""
    tracer = _Tracer(medium, omega, ring, cfg.ds, cfg.smoothing_window)
    worker = _LinkWorker(tracer, cfg, x_e)
    pts, ds_last, theta, miss, _ = worker.link(x_r, theta_init)
    return _snap_ray(tracer, pts, ds_last, theta, miss, x_r)


def _snap_ray(tracer, pts, ds_last, theta, miss, x_r):
    pts = np.array(pts, dtype=np.float64)
    pts[-1] = x_r  # within tol of the traced exit point; Fermat makes the
    ds_last = float(np.hypot(*(pts[-1] - pts[-2])))  # phase error second order
    return tracer.build_ray(pts, ds_last, theta, miss=miss)


def link_all(medium: Medium, omega: float, ring: TransducerRing,
             cfg: LinkConfig, warm: LinkedRaySet | np.ndarray | None = None
             ) -> LinkedRaySet:
    """Link every emitter to every receiver in deterministic (e, r) order.

    warm supplies per-pair starting angles (a LinkedRaySet or an (Ne, Nr)
    array). Pairs that fail are excluded and masked; the call fails only if
    more than cfg.max_fail_fraction of the pairs fail.
    """
    warm_angles = None
    if warm is not None:
        warm_angles = warm.angles if isinstance(warm, LinkedRaySet) else np.asarray(warm)
        if warm_angles.shape != (ring.n_emitters, ring.n_receivers):
            raise ConfigError("warm-start angle array has the wrong shape")

    tracer = _Tracer(medium, omega, ring, cfg.ds, cfg.smoothing_window)
    ne, nr = ring.n_emitters, ring.n_receivers
    out = LinkedRaySet(ring=ring, omega=float(omega), ds=cfg.ds,
                       angles=np.full((ne, nr), np.nan),
                       miss=np.full((ne, nr), np.nan),
                       ok=np.zeros((ne, nr), dtype=bool),
                       smoothing_window=cfg.smoothing_window)
    failures = []
    for e in range(ne):
        worker = _LinkWorker(tracer, cfg, ring.emitters[e])
        for r in range(nr):
            theta_init = None
            if warm_angles is not None and np.isfinite(warm_angles[e, r]):
                theta_init = warm_angles[e, r]
            try:
                pts, ds_last, theta, miss, used = worker.link(ring.receivers[r],
                                                              theta_init)
            except (LinkFailure, DomainError) as err:
                failures.append(((e, r), str(err)))
                continue
            out.rays[(e, r)] = _snap_ray(tracer, pts, ds_last, theta, miss,
                                         ring.receivers[r])
            out.angles[e, r] = theta
            out.miss[e, r] = miss
            out.ok[e, r] = True
            out.n_updates += max(used - 1, 0)
        out.n_traces += worker.n_traces

    if failures:
        frac = len(failures) / (ne * nr)
        if frac > cfg.max_fail_fraction:
            sample = "; ".join(f"{pair}: {msg}" for pair, msg in failures[:3])
            raise LinkFailure(
                f"{len(failures)}/{ne * nr} pairs failed to link "
                f"({100 * frac:.1f}% > {100 * cfg.max_fail_fraction:.1f}%): {sample}")
    return out


def acoustic_length(ray: Ray) -> float:
    """Trapezoidal integral of the wavenumber samples along the ray."""
    return float(_trapz(ray.k_samples, ray.arc))
