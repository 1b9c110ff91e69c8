"""Gauss-Newton sound-speed inversion on gridded ray Green's functions.

The misfit F(c) = 1/2 sum |p_model - p_obs|^2 over a batch of frequencies is
reduced with Gauss-Newton steps. The Jacobian of the forward model is the
single-scattering (Born) operator

    dp(omega, r, e) = sum_x g_r(x) Upsilon(x) dc(x) g_e(x) s(omega) dx^2

where g_e, g_r are the heterogeneous Green's functions from the emitter and
receiver, gridded from ray fans onto the reconstruction nodes, and

    Upsilon = d(k~^2)/dc = (-2 omega / c^2) (omega/c + alpha (tanfac + i)),
    alpha = alpha0 omega^y,  k~ = omega/c + alpha0 omega^y (tanfac + i).

Each Gauss-Newton subproblem  H dc = -grad  (H = A^H A, matrix-free products
of the Born operator with its adjoint) is solved with a few conjugate-gradient
iterations, truncated early if a search direction has non-positive curvature.

Every frequency batch relinks the rays in the current iterate (warm-started
from the previous batch), grids the Green's functions once at the batch's
center frequency, and evaluates the batch's frequencies from the
frequency-separable per-ray integrals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import QhullError, cKDTree

from .grids import ConfigError, Grid2D
from .greens import (SourceSpectrum, SpectraSet, _aux_pair, _sample_polyline,
                     caustic_counts, pair_tables, ray_jacobian,
                     spectra_from_tables, JACOBIAN_FLOOR)
from .medium import Medium, SOUND_SPEED_BAND, TransducerRing
from .rays import LinkConfig, LinkedRaySet, _Tracer, link_all

__all__ = [
    "BornOperator",
    "FrequencySchedule",
    "GriddedGreens",
    "GriddingConfig",
    "InversionResult",
    "cg_subproblem",
    "default_schedule",
    "frechet_adjoint_apply",
    "frechet_apply",
    "grid_greens",
    "hessian_apply",
    "invert",
    "objective",
    "relative_error",
    "residual",
    "scattering_potential",
]


# ---------------------------------------------------------------------------
# gridding ray Green's functions onto the reconstruction nodes


@dataclass(frozen=True)
class GriddingConfig:
    """How per-origin ray data are spread onto grid nodes.

    receiver_fan > 0 traces that many uniformly spaced rays from each receiver
    (Jacobians from adjacent fan rays); receiver_fan = 0 reuses the linked
    rays in reverse, which is cheaper but leaves wide angular gaps when there
    are few emitters.
    """

    receiver_fan: int = 64
    fan_halfwidth_deg: float = 87.0
    delta_theta: float = 1e-4      # auxiliary-ray offset for linked-ray Jacobians
    idw_neighbors: int = 6         # fallback when triangulation fails


@dataclass
class SideFields:
    """Gridded Green's data for one origin (emitter or receiver).

    The interpolated quantities are referenced to the circular wavefront of a
    homogeneous medium with the origin's slowness: tau_dev = tau - r s_src,
    a0_dev = int alpha0 - r a0_src, w_hat = W sqrt(r) with r the straight
    distance from the origin. These are constant along homogeneous rays, so
    linear interpolation across the fan is exact there and only has to follow
    the heterogeneity-induced deviations elsewhere; the analytic radial parts
    are restored at the nodes from the stored node distances."""

    origin: np.ndarray
    tau_dev: np.ndarray        # (n1, n2)
    a0_dev: np.ndarray
    w_hat: np.ndarray          # W sqrt(r); W = amplitude / (8 pi k_src)^(-1/2)
    kc: np.ndarray             # caustic counter (interpolated, fractional)
    covered: np.ndarray        # bool (n1, n2)
    r_node: np.ndarray         # |node - origin|
    s_src: float
    a0_src: float
    fallback: bool = False     # inverse-distance fallback was used

    @property
    def tau(self):
        return self.tau_dev + self.r_node * self.s_src

    @property
    def a0c(self):
        return self.a0_dev + self.r_node * self.a0_src

    @property
    def w(self):
        return self.w_hat / np.sqrt(np.maximum(self.r_node, 1e-12))


def _ray_columns(points, arc, slowness, alpha0, jac, ref_index,
                 origin, s_src, a0_src):
    """Per-point (tau_dev, a0_dev, w_hat, kc) columns for one ray."""
    j_ref = abs(jac[ref_index])
    if j_ref == 0:
        raise ConfigError("Jacobian vanishes at the amplitude anchor")
    c = 1.0 / slowness
    j_abs = np.maximum(np.abs(jac), JACOBIAN_FLOOR * j_ref)
    w = np.sqrt((c / c[ref_index]) * (j_ref / j_abs) / arc[ref_index])
    w[0] = w[ref_index]
    r = np.hypot(points[:, 0] - origin[0], points[:, 1] - origin[1])
    return (cumulative_trapezoid(slowness, arc, initial=0.0) - r * s_src,
            cumulative_trapezoid(alpha0, arc, initial=0.0) - r * a0_src,
            w * np.sqrt(r),
            caustic_counts(jac).astype(float))


def _gather_side(origin, clouds, grid: Grid2D, cfg: GriddingConfig,
                 s_src, a0_src) -> SideFields:
    """Interpolate stacked per-ray columns onto the grid nodes.

    clouds: list of (points, values(n,4)) per ray.
    """
    pts = np.concatenate([c[0] for c in clouds])
    vals = np.concatenate([c[1] for c in clouds])
    nodes = grid.node_points()
    fallback = False
    try:
        if len(pts) < 4:
            raise QhullError("too few points")
        interp = LinearNDInterpolator(pts, vals)
        out = interp(nodes)
    except QhullError:
        fallback = True
        tree = cKDTree(pts)
        d, idx = tree.query(nodes, k=cfg.idw_neighbors)
        wgt = 1.0 / np.maximum(d, 1e-12) ** 2
        out = (wgt[:, :, None] * vals[idx]).sum(axis=1) / wgt.sum(axis=1)[:, None]
        out[d.min(axis=1) > 2.0 * grid.spacing] = np.nan
    covered = np.isfinite(out[:, 0])
    out = np.where(np.isfinite(out), out, 0.0)
    n1, n2 = grid.shape
    origin = np.asarray(origin, dtype=float)
    r_node = np.hypot(nodes[:, 0] - origin[0], nodes[:, 1] - origin[1])
    return SideFields(origin=origin,
                      tau_dev=out[:, 0].reshape(n1, n2),
                      a0_dev=out[:, 1].reshape(n1, n2),
                      w_hat=out[:, 2].reshape(n1, n2),
                      kc=out[:, 3].reshape(n1, n2),
                      covered=covered.reshape(n1, n2),
                      r_node=r_node.reshape(n1, n2),
                      s_src=float(s_src), a0_src=float(a0_src),
                      fallback=fallback)


@dataclass
class GriddedGreens:
    grid: Grid2D
    omega: float                     # trace frequency of the geometry
    emitter_sides: list
    receiver_sides: list
    mask: np.ndarray = None          # union coverage, bool (n1, n2)

    def __post_init__(self):
        if self.mask is None:
            cov_e = np.zeros(self.grid.shape, dtype=bool)
            for s in self.emitter_sides:
                cov_e |= s.covered
            cov_r = np.zeros(self.grid.shape, dtype=bool)
            for s in self.receiver_sides:
                cov_r |= s.covered
            self.mask = cov_e & cov_r

    def greens_values(self, side: SideFields, omega: float, tanfac: float,
                      y: float) -> np.ndarray:
        """Complex Green's samples of one side at all nodes (0 off coverage)."""
        k_src = omega * side.s_src + tanfac * omega**y * side.a0_src
        tau, a0c = side.tau, side.a0c
        amp = ((8.0 * np.pi * k_src) ** -0.5 * side.w
               * np.exp(-(omega**y) * a0c))
        phase = (omega * tau + tanfac * omega**y * a0c
                 + 0.5 * np.pi * side.kc + 0.25 * np.pi)
        return np.where(side.covered, amp * np.exp(1j * phase), 0.0).ravel()

    def tau_gradient(self, side: SideFields) -> np.ndarray:
        """grad tau at the nodes, (N, 2): the side's slowness vector field.

        The radial part r*s_src differentiates analytically; only the small
        deviation field needs finite differences, so the result stays clean
        near the origin where tau itself is singular in angle."""
        g1, g2 = np.gradient(side.tau_dev, self.grid.spacing)
        nodes = self.grid.node_points()
        d = nodes - side.origin
        r = np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-12)
        g = np.stack([g1.ravel() + side.s_src * d[:, 0] / r,
                      g2.ravel() + side.s_src * d[:, 1] / r], axis=1)
        # coverage-boundary differences can be junk; |grad tau| is physically
        # bounded by the slowest admissible medium
        nrm = np.hypot(g[:, 0], g[:, 1])
        s_max = 1.0 / SOUND_SPEED_BAND[0]
        over = nrm > s_max
        g[over] *= (s_max / nrm[over])[:, None]
        return g


def _fan_side(tracer: _Tracer, origin, center, cfg: GriddingConfig,
              grid: Grid2D) -> SideFields:
    """Trace a uniform inward fan from one ring point and grid it.

    Jacobians come from adjacent fan rays (one-sided at the fan edges); the
    fan spacing plays the role of the angular offset.
    """
    n = cfg.receiver_fan
    inward = np.arctan2(center[1] - origin[1], center[0] - origin[0])
    half = np.deg2rad(cfg.fan_halfwidth_deg)
    thetas = inward + np.linspace(-half, half, n)
    dpsi = thetas[1] - thetas[0]
    rays = []
    for th in thetas:
        pts, ds_last, ok = tracer.raw(origin, th)
        if ok:
            rays.append(tracer.build_ray(pts, ds_last, th))
        else:
            rays.append(None)  # trapped; neighbors fall back to one-sided
    clouds = []
    s_src = a0_src = None
    for i, ray in enumerate(rays):
        if ray is None:
            continue
        lo = rays[i - 1] if i > 0 and rays[i - 1] is not None else ray
        hi = rays[i + 1] if i + 1 < n and rays[i + 1] is not None else ray
        if lo is hi:   # isolated ray; no angular derivative available
            continue
        dth = dpsi * (2.0 if (lo is not ray and hi is not ray) else 1.0)
        p_hi = _sample_polyline(hi.points, hi.arc, ray.arc)
        p_lo = _sample_polyline(lo.points, lo.arc, ray.arc)
        dxdth = (p_hi - p_lo) / dth
        dxds = np.gradient(ray.points, ray.arc, axis=0)
        jac = dxdth[:, 0] * dxds[:, 1] - dxdth[:, 1] * dxds[:, 0]
        if s_src is None:
            s_src, a0_src = ray.slowness_samples[0], ray.alpha0_samples[0]
        cols = _ray_columns(ray.points, ray.arc, ray.slowness_samples,
                            ray.alpha0_samples, jac, 1, origin, s_src, a0_src)
        clouds.append((ray.points, np.column_stack(cols)))
    if not clouds:
        raise ConfigError("no usable rays in fan; medium traps all of them")
    return _gather_side(origin, clouds, grid, cfg, s_src, a0_src)


def _linked_side(tracer: _Tracer, origin, rays, cfg: GriddingConfig,
                 grid: Grid2D) -> SideFields:
    """Grid the Green's function of one emitter from its linked rays, with
    auxiliary-ray Jacobians."""
    clouds = []
    s_src = a0_src = None
    for ray in rays:
        aux_p, aux_m = _aux_pair(tracer, ray.points[0], ray.theta0,
                                 cfg.delta_theta)
        jac, _ = ray_jacobian(ray, aux_p, aux_m, cfg.delta_theta)
        if s_src is None:
            s_src, a0_src = ray.slowness_samples[0], ray.alpha0_samples[0]
        cols = _ray_columns(ray.points, ray.arc, ray.slowness_samples,
                            ray.alpha0_samples, jac, 1, origin, s_src, a0_src)
        clouds.append((ray.points, np.column_stack(cols)))
    if not clouds:
        raise ConfigError("emitter has no linked rays to grid")
    return _gather_side(origin, clouds, grid, cfg, s_src, a0_src)


def grid_greens(medium: Medium, linked: LinkedRaySet,
                cfg: GriddingConfig | None = None,
                grid: Grid2D | None = None) -> GriddedGreens:
    """Node maps of the Green's function from every emitter and receiver.

    Emitter sides reuse the linked rays. Receiver sides trace uniform inward
    fans (cfg.receiver_fan rays each); with receiver_fan = 0 they instead
    reuse the linked rays in reverse, one cloud per receiver.
    """
    cfg = cfg or GriddingConfig()
    grid = grid or medium.grid
    ring = linked.ring
    tracer = _Tracer(medium, linked.omega, ring, linked.ds,
                     linked.smoothing_window)
    emitter_sides = []
    for e in range(ring.n_emitters):
        rays = [linked.rays[(e, r)] for r in range(ring.n_receivers)
                if linked.ok[e, r]]
        emitter_sides.append(_linked_side(tracer, ring.emitters[e], rays,
                                          cfg, grid))
    receiver_sides = []
    if cfg.receiver_fan > 0:
        for r in range(ring.n_receivers):
            receiver_sides.append(_fan_side(tracer, ring.receivers[r],
                                            ring.center, cfg, grid))
    else:
        from .greens import reversed_ray
        for r in range(ring.n_receivers):
            rays = [reversed_ray(linked.rays[(e, r)])
                    for e in range(ring.n_emitters) if linked.ok[e, r]]
            clouds = []
            s_src = a0_src = None
            for ray in rays:
                aux_p, aux_m = _aux_pair(tracer, ray.points[0], ray.theta0,
                                         cfg.delta_theta,
                                         first_step=ray.arc[1])
                jac, _ = ray_jacobian(ray, aux_p, aux_m, cfg.delta_theta)
                ref = 1 if ray.arc[1] > 1e-6 * ray.ds else 2
                if s_src is None:
                    s_src, a0_src = (ray.slowness_samples[0],
                                     ray.alpha0_samples[0])
                cols = _ray_columns(ray.points, ray.arc, ray.slowness_samples,
                                    ray.alpha0_samples, jac, ref,
                                    ring.receivers[r], s_src, a0_src)
                clouds.append((ray.points, np.column_stack(cols)))
            receiver_sides.append(_gather_side(ring.receivers[r], clouds,
                                               grid, cfg, s_src, a0_src))
    return GriddedGreens(grid=grid, omega=linked.omega,
                         emitter_sides=emitter_sides,
                         receiver_sides=receiver_sides)


# ---------------------------------------------------------------------------
# scattering potential and the Born operator


def scattering_potential(medium: Medium, reference: Medium, omega: float
                         ) -> np.ndarray:
    """u = k~^2 - k~_ref^2 at the grid nodes (node-value convention)."""
    if not medium.grid.same_geometry(reference.grid):
        raise ConfigError("media live on different grids")
    tanfac = medium.tan_factor
    y = medium.power_y

    def ktilde(med):
        c = med.sound_speed.coefficients
        a = med.alpha0.coefficients * omega**y
        return omega / c + a * (tanfac + 1j)

    return ktilde(medium)**2 - ktilde(reference)**2


def _upsilon(medium: Medium, omega: float) -> np.ndarray:
    """d(k~^2)/dc at the grid nodes."""
    c = medium.sound_speed.coefficients.ravel()
    alpha = medium.alpha0.coefficients.ravel() * omega**medium.power_y
    return (-2.0 * omega / c**2) * (omega / c + alpha * (medium.tan_factor + 1j))


class BornOperator:
    """Matrix-free single-scattering maps between node perturbations dc and
    per-frequency residual spectra, for one frequency batch sharing one
    gridded geometry.

    The perturbation lives on the cubic B-spline basis, so the volume
    integral of kernel times basis function carries the basis transform
    sinc^4 evaluated at the kernel's local phase gradient
    omega * (grad tau_e + grad tau_r): unity on the stationary
    (transmission) zone, vanishing where the kernel fringes fall below the
    node sampling. Without it the plain node sum aliases those fringes into
    broadband fictitious sensitivity that the data can never confirm.

    apply:   dc (N,) real -> dp (Nw, Nr, Ne) complex
    adjoint: dp -> real gradient-space vector (N,)
    hessian: adjoint(apply(dc)) — the Gauss-Newton normal operator.
    """

    def __init__(self, gridded: GriddedGreens, medium: Medium,
                 frequencies, source: SourceSpectrum):
        self.gridded = gridded
        self.medium = medium
        self.frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
        self.mask = gridded.mask.ravel()
        self._idx = np.flatnonzero(self.mask)
        self.n_receivers = len(gridded.receiver_sides)
        self.n_emitters = len(gridded.emitter_sides)
        spacing = gridded.grid.spacing
        self.cell_area = spacing**2
        tanfac, y = medium.tan_factor, medium.power_y
        ge = np.stack([gridded.tau_gradient(s)[self._idx]
                       for s in gridded.emitter_sides])
        gr = np.stack([gridded.tau_gradient(s)[self._idx]
                       for s in gridded.receiver_sides])
        # (Ne, Nr, Nm, 2) kernel slowness vectors; phase gradient = omega*this
        ssum = (ge[:, None] + gr[None, :]).astype(np.float32)
        # np.sinc(z) = sin(pi z)/(pi z): argument omega*s*spacing/2 in units
        # of pi
        half = 0.5 * spacing / np.pi
        self._J = []       # per omega: (Nr*Ne, Nm) kernel matrix
        s_vals = source(self.frequencies)
        for f, s in zip(self.frequencies, s_vals):
            w = 2.0 * np.pi * f
            E = np.stack([gridded.greens_values(side, w, tanfac, y)[self._idx]
                          for side in gridded.emitter_sides]) * s
            R = np.stack([gridded.greens_values(side, w, tanfac, y)[self._idx]
                          for side in gridded.receiver_sides])
            quad = (np.sinc(half * w * ssum[..., 0])
                    * np.sinc(half * w * ssum[..., 1])) ** 4
            J = np.einsum("rx,ex,erx->rex", R, E,
                          quad.astype(np.float64), optimize=True)
            J *= _upsilon(medium, w)[self._idx] * self.cell_area
            self._J.append(J.reshape(-1, len(self._idx)))

    @property
    def n_nodes(self):
        return self.gridded.grid.shape[0] * self.gridded.grid.shape[1]

    def apply(self, dc: np.ndarray) -> np.ndarray:
        dc_m = np.asarray(dc, dtype=float).ravel()[self._idx]
        out = np.empty((len(self.frequencies), self.n_receivers,
                        self.n_emitters), dtype=np.complex128)
        for i, J in enumerate(self._J):
            out[i] = (J @ dc_m).reshape(self.n_receivers, self.n_emitters)
        return out

    def adjoint(self, dp: np.ndarray) -> np.ndarray:
        dp = np.asarray(dp, dtype=np.complex128)
        acc = np.zeros(len(self._idx))
        for i, J in enumerate(self._J):
            acc += (J.T @ dp[i].conj().ravel()).real
        grad = np.zeros(self.n_nodes)
        grad[self._idx] = acc
        return grad

    def hessian(self, dc: np.ndarray) -> np.ndarray:
        return self.adjoint(self.apply(dc))


def frechet_apply(born: BornOperator, dc) -> np.ndarray:
    """Linearized spectra perturbation for a node sound-speed perturbation."""
    return born.apply(dc)


def frechet_adjoint_apply(born: BornOperator, dp) -> np.ndarray:
    """Adjoint of frechet_apply under the real inner product Re<a, b*>."""
    return born.adjoint(dp)


def hessian_apply(born: BornOperator, dc) -> np.ndarray:
    """Gauss-Newton normal-operator product J^H J dc (real)."""
    return born.hessian(dc)


# ---------------------------------------------------------------------------
# misfit pieces


def residual(model: SpectraSet, data: SpectraSet) -> np.ndarray:
    """(model - data) with invalid entries zeroed."""
    if model.values.shape != data.values.shape:
        raise ConfigError("model/data spectra shapes differ")
    joint = model.mask & data.mask
    return np.where(joint, model.values - data.values, 0.0)


def objective(resid: np.ndarray) -> float:
    return 0.5 * float(np.vdot(resid, resid).real)


def relative_error(image, truth, c0=None, mask=None) -> float:
    """RE in percent: ||image - truth|| / ||c0 - truth|| * 100 over node
    values (optionally masked). c0 (scalar or map) defaults to the mean of
    `truth` over the mask, i.e. the best constant initial guess."""
    a = np.asarray(image, dtype=float)
    b = np.asarray(truth, dtype=float)
    if mask is not None:
        a, b = a[mask], b[mask]
    if c0 is None:
        ref = np.full_like(b, b.mean())
    else:
        ref = np.broadcast_to(np.asarray(c0, dtype=float),
                              np.asarray(truth, dtype=float).shape)
        if mask is not None:
            ref = ref[mask]
    denom = np.linalg.norm(ref - b)
    if denom == 0:
        raise ConfigError("truth equals the reference model; RE undefined")
    return float(np.linalg.norm(a - b) / denom * 100.0)


# ---------------------------------------------------------------------------
# conjugate gradients on the Gauss-Newton subproblem


def cg_subproblem(hessian, grad: np.ndarray, l_max: int = 10):
    """Approximately solve H dc = -grad by CG from dc = 0.

    Iteration stops early on non-positive curvature (d^T H d <= 0), returning
    the previous iterate. Returns (dc, info) with info carrying the squared
    residual-norm history (descending for an SPD H) and the stop reason.
    """
    x = np.zeros_like(grad)
    r = -grad
    d = r.copy()
    rho = float(r @ r)
    history = [rho]
    iterates = [x.copy()]
    reason = "l_max"
    for _ in range(l_max):
        z = hessian(d)
        dz = float(d @ z)
        if dz <= 0:
            reason = "curvature"
            break
        a = rho / dz
        x += a * d
        r -= a * z
        rho_new = float(r @ r)
        history.append(rho_new)
        iterates.append(x.copy())
        if rho_new == 0.0:  # residual underflow: exact solve
            reason = "converged"
            break
        d = r + (rho_new / rho) * d
        rho = rho_new
    return x, {"residual_sq": np.array(history), "reason": reason,
               "iterations": len(history) - 1, "iterates": iterates}


# ---------------------------------------------------------------------------
# frequency schedule and the outer loop


@dataclass(frozen=True)
class FrequencySchedule:
    frequencies: np.ndarray
    batch_size: int = 4
    order: str = "ascending"

    def __post_init__(self):
        object.__setattr__(self, "frequencies",
                           np.sort(np.asarray(self.frequencies, dtype=float)))
        if self.order not in ("ascending", "descending"):
            raise ConfigError(f"unknown batch order {self.order!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def batches(self):
        n = len(self.frequencies)
        idx = np.arange(n)
        groups = [idx[i:i + self.batch_size]
                  for i in range(0, n, self.batch_size)]
        if self.order == "descending":
            groups = groups[::-1]
        return groups


def default_schedule(f_lo: float = 0.2e6, f_hi: float = 1.5e6, n: int = 140,
                     batch_size: int = 4, order: str = "ascending"
                     ) -> FrequencySchedule:
    return FrequencySchedule(np.linspace(f_lo, f_hi, n), batch_size, order)


@dataclass
class InversionResult:
    medium: Medium
    history: list = field(default_factory=list)
    linked: LinkedRaySet = None

    @property
    def misfits(self):
        return np.array([h["misfit"] for h in self.history])


def _match_frequencies(spectra: SpectraSet, schedule: FrequencySchedule):
    """Indices of schedule frequencies inside the spectra's frequency axis."""
    idx = np.searchsorted(spectra.frequencies, schedule.frequencies)
    idx = np.clip(idx, 0, len(spectra.frequencies) - 1)
    left = np.clip(idx - 1, 0, None)
    pick = np.where(np.abs(spectra.frequencies[left] - schedule.frequencies)
                    < np.abs(spectra.frequencies[idx] - schedule.frequencies),
                    left, idx)
    bad = np.abs(spectra.frequencies[pick] - schedule.frequencies) > 1.0
    if bad.any():
        missing = schedule.frequencies[bad][:4]
        raise ConfigError(
            f"spectra are missing scheduled frequencies (first few: "
            f"{missing.tolist()} Hz)")
    return pick


def _check_inverse_crime(prov: dict, grid, link, allowed: bool):
    """Refuse spectra generated with the same grid spacing and ray step this
    inversion is about to use: reconstructing on the discretization that made
    the data hides model error. Deliberate override via allow_inverse_crime."""
    if allowed or not prov:
        return
    if (np.isclose(prov.get("grid_spacing", -1.0), grid.spacing, rtol=1e-6)
            and np.isclose(prov.get("ray_step", -1.0), link.ds, rtol=1e-6)):
        same_window = prov.get("smoothing_window") == link.smoothing_window
        raise ConfigError(
            "input spectra were simulated with this inversion's grid spacing "
            f"({grid.spacing:.3e} m) and ray step ({link.ds:.3e} m)"
            + (" and smoothing window" if same_window else "")
            + "; use a finer simulation grid, or pass "
            "allow_inverse_crime=True if the crime is intentional")


def invert(data: SpectraSet, medium0: Medium,
           schedule: FrequencySchedule | None = None,
           source: SourceSpectrum | None = None,
           link: LinkConfig | None = None,
           gridding: GriddingConfig | None = None,
           l_max: int = 10,
           rho_min: float = 0.5,
           guard_slack: float = 0.05,
           truth: np.ndarray | None = None,
           truth_mask: np.ndarray | None = None,
           allow_inverse_crime: bool = False,
           callback=None) -> InversionResult:
    """Batch Gauss-Newton inversion of boundary spectra for sound speed.

    The absorption map of `medium0` is held fixed; only sound speed is
    updated. Each batch: relink rays (warm), evaluate the ray forward model,
    grid Green's functions, run l_max CG steps on the normal equations, and
    accept the CG iterate with the lowest relinked misfit among those whose
    true descent reaches rho_min of the Born-predicted descent. If no full
    iterate qualifies, the least-bad one is halved once and re-tested; a
    batch whose halved step still fails is skipped — the model never absorbs
    an update known to fit only its own batch.

    With power_y = 2 the ray travel times are achromatic, so a genuine
    sound-speed correction improves every band at once while a step that
    chases noise or model error de-fits the bands already explained. Each
    candidate therefore also has to keep the previous batch's misfit within
    guard_slack (relative) of its current value.
    """
    ring = data.ring
    source = source or SourceSpectrum()
    schedule = schedule or FrequencySchedule(data.frequencies)
    link = link or LinkConfig(ds=medium0.grid.spacing,
                              tol=1e-4 * medium0.grid.spacing,
                              smoothing_window=7)
    gridding = gridding or GriddingConfig()
    _check_inverse_crime(data.provenance, medium0.grid, link,
                         allow_inverse_crime)
    sched_idx = _match_frequencies(data, schedule)
    lo, hi = SOUND_SPEED_BAND

    medium = medium0
    warm = None
    result = InversionResult(medium=medium)
    guard_f = None
    guard_data = None

    for batch_no, batch in enumerate(schedule.batches()):
        f_batch = schedule.frequencies[batch]
        data_idx = sched_idx[batch]
        omega_c = 2.0 * np.pi * float(np.median(f_batch))

        linked = link_all(medium, omega_c, ring, link, warm=warm)
        warm = linked
        tables = pair_tables(medium, linked, gridding.delta_theta)
        model = spectra_from_tables(tables, medium, ring, source, f_batch)
        batch_data = data.select(data_idx)
        res = residual(model, batch_data)
        f0 = objective(res)
        if guard_f is None:
            g0 = np.nan
        else:
            guard_model = spectra_from_tables(tables, medium, ring, source,
                                              guard_f)
            g0 = objective(residual(guard_model, guard_data))

        gridded = grid_greens(medium, linked, gridding)
        born = BornOperator(gridded, medium, f_batch, source)
        grad = born.adjoint(res)
        _, cg_info = cg_subproblem(born.hessian, grad, l_max=l_max)

        # The normal equations model single scattering under frozen ray
        # geometry, so late CG iterates can leave the linearization's trust
        # region while still improving the quadratic model. Keep the iterate
        # whose true relinked batch misfit is lowest; halve once if even
        # that one rises.
        iterates = cg_info["iterates"]
        n_its = cg_info["iterations"]
        halved = False
        chosen = 0
        rho = np.nan
        g1 = np.nan
        if n_its == 0:
            f1, trial, linked_trial = f0, medium, linked
        else:
            # Gate each candidate on (a) the trust ratio rho = true descent /
            # Born-predicted descent — an iterate that fits its own batch by
            # rationalizing model error descends far less than predicted —
            # and (b) the previous batch's misfit, which a noise-chasing
            # step degrades even though its own fl < f0.
            g_cap = g0 * (1.0 + guard_slack)
            best, fallback = None, None
            for l in sorted({min(l, n_its) for l in (1, 2, 4, 7, l_max)}):
                x = iterates[l]
                f_pred = objective(res + born.apply(x))
                fl, gl, trial_l, linked_l = _trial_misfit(
                    medium, x.reshape(medium.grid.shape), lo, hi, omega_c,
                    ring, link, linked, gridding, source, f_batch,
                    batch_data, guard_f, guard_data)
                rho_l = (f0 - fl) / max(f0 - f_pred, 1e-300)
                cand = (fl, trial_l, linked_l, l, rho_l, gl)
                if (fl < f0 and rho_l >= rho_min
                        and not gl > g_cap  # nan-safe: no guard yet
                        and (best is None or fl < best[0])):
                    best = cand
                if fallback is None or fl < fallback[0]:
                    fallback = cand
            if best is None:
                # no trusted full iterate: halve the least-bad one once
                halved = True
                x = 0.5 * iterates[fallback[3]]
                f_pred = objective(res + born.apply(x))
                fl, gl, trial_l, linked_l = _trial_misfit(
                    medium, x.reshape(medium.grid.shape), lo, hi, omega_c,
                    ring, link, linked, gridding, source, f_batch,
                    batch_data, guard_f, guard_data)
                rho_l = (f0 - fl) / max(f0 - f_pred, 1e-300)
                if fl < f0 and rho_l >= rho_min and not gl > g_cap:
                    best = (fl, trial_l, linked_l, fallback[3], rho_l, gl)
            if best is None:
                warnings.warn(
                    f"batch {batch_no}: no CG iterate gave a trusted misfit "
                    f"decrease (best l={fallback[3]}: {f0:.3e} -> "
                    f"{fallback[0]:.3e}, rho={fallback[4]:.3f}); skipping "
                    "this batch")
                f1, trial, linked_trial = f0, medium, linked
            else:
                f1, trial, linked_trial, chosen, rho, g1 = best
        medium = trial
        warm = linked_trial
        guard_f = f_batch
        guard_data = batch_data

        step = np.abs(iterates[chosen]).max() * (0.5 if halved else 1.0)
        entry = {"batch": batch_no, "frequencies": f_batch,
                 "misfit": f0, "misfit_after": f1,
                 "step_max": float(step), "halved": halved,
                 "cg": {k: v for k, v in cg_info.items() if k != "iterates"},
                 "cg_depth": chosen, "rho": float(rho),
                 "guard_ratio": float(g1 / g0) if g0 > 0 else np.nan,
                 "n_linked": len(linked.rays),
                 "link_failures": linked.n_failed}
        if truth is not None:
            entry["relative_error"] = relative_error(
                medium.sound_speed.coefficients, truth, medium.c0, truth_mask)
        result.history.append(entry)
        if callback is not None:
            callback(entry, medium)

    result.medium = medium
    result.linked = warm
    return result


def _trial_misfit(medium, dc, lo, hi, omega_c, ring, link, linked, gridding,
                  source, f_batch, batch_data, guard_f=None, guard_data=None):
    trial = medium.with_sound_speed(
        np.clip(medium.sound_speed.coefficients + dc, lo, hi))
    linked_trial = link_all(trial, omega_c, ring, link, warm=linked)
    tables = pair_tables(trial, linked_trial, gridding.delta_theta)
    model = spectra_from_tables(tables, trial, ring, source, f_batch)
    fl = objective(residual(model, batch_data))
    gl = np.nan
    if guard_f is not None:
        guard_model = spectra_from_tables(tables, trial, ring, source,
                                          guard_f)
        gl = objective(residual(guard_model, guard_data))
    return fl, gl, trial, linked_trial
