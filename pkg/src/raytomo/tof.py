"""First-arrival picking and bent-ray time-of-flight inversion.

The TOF stage produces the initial sound-speed map for the waveform
inversion. Per trace, a two-window energy-ratio detector finds the arrival
neighborhood and an information-criterion minimum refines the pick to a
sample. The sinogram of pick differences against a water reference is then
inverted for slowness: each outer iteration links rays in the current model
(straight rays in the first), deposits per-segment path lengths into a sparse
system J, solves J dn = dt_res by least-squares CG, smooths the update, and
accepts it only while the sinogram misfit decreases.

Absorption is ignored during TOF ray tracing (the picker sees the arrival,
not the amplitude), and the slowness update is the unknown: travel time is
linear in slowness along fixed rays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .grids import ConfigError, Grid2D, ScalarField, smooth_field
from .medium import Medium, SOUND_SPEED_BAND, TransducerRing
from .rays import LinkConfig, link_all

__all__ = [
    "TofResult",
    "TimeSeriesSet",
    "TofSinogram",
    "cgls",
    "path_matrix",
    "pick_first_arrival",
    "straight_path_matrix",
    "tof_invert",
    "tof_sinogram",
]


@dataclass
class TimeSeriesSet:
    """Real traces p(t, r, e) on a uniform time axis."""

    samples: np.ndarray          # (Nt, Nr, Ne)
    dt: float
    t0: float = 0.0
    ring: TransducerRing = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if not np.isfinite(self.samples).all():
            raise ConfigError("time series contain non-finite samples")

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.samples.shape[0])


@dataclass
class TofResult:
    """Outcome of the bent-ray TOF inversion: the best-misfit model seen and
    one history entry per iteration."""

    medium: Medium
    history: list = field(default_factory=list)

    @property
    def misfits(self):
        return np.array([h["misfit"] for h in self.history])


@dataclass
class TofSinogram:
    """First-arrival discrepancies against the water reference, Δt(r, e)."""

    tof: np.ndarray              # (Nr, Ne) seconds
    mask: np.ndarray             # bool; False entries excluded from all sums

    def __post_init__(self):
        self.tof = np.asarray(self.tof, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tof.shape != self.mask.shape:
            raise ConfigError("sinogram and mask shapes differ")

    @property
    def n_valid(self):
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# picking


def _pick_trace(x: np.ndarray, dt: float, short: int, long: int,
                min_snr: float) -> float:
    """One trace: energy-ratio threshold crossing refined by an
    information-criterion minimum. Returns the arrival time relative to the
    first sample, or NaN for traces below the noise floor."""
    n = len(x)
    peak = np.abs(x).max()
    if peak == 0:
        return np.nan
    e = x * x
    ce = np.concatenate(([0.0], np.cumsum(e)))
    sta = (ce[short:] - ce[:-short]) / short           # mean energy on [i, i+short)
    lta = (ce[long:] - ce[:-long]) / long              # mean energy on [i, i+long)
    # noise floor: the quietest long window anywhere (arrival-independent)
    noise2 = max(float(lta.min()), peak * peak * 1e-30)
    if peak * peak / noise2 < min_snr * min_snr:
        return np.nan
    # short window just AFTER the long window: contrast at trace index j + long
    m = n - long - short + 1
    ratio = sta[long:long + m] / (lta[:m] + noise2)
    i0 = int(np.argmax(ratio)) + long                  # strongest onset contrast
    # first crossing of a fraction of the local energy maximum; picking on the
    # steep part of the ramp keeps the jitter under a sample at moderate SNR
    span = 4 * short
    e_hat = float(sta[i0:min(i0 + span, len(sta))].max())
    thresh = noise2 + 0.02 * (e_hat - noise2)
    start = max(i0 - span, 0)
    rel = np.argmax(sta[start:i0 + 1] >= thresh)
    center = start + int(rel)
    # information-criterion refinement: split point minimizing summed
    # log-variance of the two halves, within a window around the crossing
    lo = max(center - short, 2)
    hi = min(center + short, n - 2)
    k = np.arange(lo, hi)
    v1 = ce[k] / k                                     # mean power before k
    v2 = (ce[-1] - ce[k]) / (n - k)                    # and after
    crit = k * np.log(v1 + 1e-300) + (n - k) * np.log(v2 + 1e-300)
    return float(k[np.argmin(crit)]) * dt


def pick_first_arrival(series: TimeSeriesSet, short: int = 10,
                       long: int = 50, min_snr: float = 6.0):
    """Per-trace arrival times (r, e) and a validity mask.

    Traces whose peak-to-noise ratio falls below min_snr are masked.
    """
    nt, nr, ne = series.samples.shape
    if nt < 4 * long:
        raise ConfigError(f"traces too short for picking ({nt} samples)")
    times = np.full((nr, ne), np.nan)
    for e in range(ne):
        for r in range(nr):
            times[r, e] = _pick_trace(series.samples[:, r, e], series.dt,
                                      short, long, min_snr)
    mask = np.isfinite(times)
    return np.where(mask, series.t0 + times, 0.0), mask


def tof_sinogram(phantom_picks, phantom_mask, water_picks, water_mask
                 ) -> TofSinogram:
    """Pick differences phantom - water; any picker bias common to both sets
    cancels in the difference."""
    mask = np.asarray(phantom_mask, bool) & np.asarray(water_mask, bool)
    return TofSinogram(np.where(mask, phantom_picks - water_picks, 0.0), mask)


# ---------------------------------------------------------------------------
# path-length system


def _deposit_segments(points: np.ndarray, grid: Grid2D):
    """Bilinear deposition of a polyline's per-segment lengths onto grid
    nodes. Returns (node_indices, weights); weights sum to the path length."""
    mids = 0.5 * (points[1:] + points[:-1])
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    n1, n2 = grid.shape
    u = (mids[:, 0] - grid.origin[0]) / grid.spacing
    v = (mids[:, 1] - grid.origin[1]) / grid.spacing
    i = np.clip(np.floor(u).astype(np.int64), 0, n1 - 2)
    j = np.clip(np.floor(v).astype(np.int64), 0, n2 - 2)
    fu = u - i
    fv = v - j
    idx = np.concatenate([i * n2 + j, i * n2 + j + 1,
                          (i + 1) * n2 + j, (i + 1) * n2 + j + 1])
    wgt = np.concatenate([seg * (1 - fu) * (1 - fv), seg * (1 - fu) * fv,
                          seg * fu * (1 - fv), seg * fu * fv])
    return idx, wgt


def path_matrix(rays, grid: Grid2D) -> sparse.csr_matrix:
    """Sparse system J (n_rays, n_nodes): row i deposits ray i's segment
    lengths bilinearly, so J @ slowness approximates int s ds and each row
    sums to the ray's length exactly."""
    rows, cols, vals = [], [], []
    for i, pts in enumerate(rays):
        idx, wgt = _deposit_segments(np.asarray(pts, dtype=float), grid)
        rows.append(np.full(len(idx), i, dtype=np.int64))
        cols.append(idx)
        vals.append(wgt)
    n = grid.shape[0] * grid.shape[1]
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(rays), n))


def straight_path_matrix(ring: TransducerRing, grid: Grid2D,
                         pairs, n_sub: int = 4) -> sparse.csr_matrix:
    """Path matrix for straight emitter-receiver chords, subdividing each
    chord at n_sub points per grid spacing."""
    rays = []
    for e, r in pairs:
        a, b = ring.emitters[e], ring.receivers[r]
        n = max(int(np.ceil(np.hypot(*(b - a)) / grid.spacing * n_sub)), 2)
        t = np.linspace(0.0, 1.0, n)[:, None]
        rays.append(a + t * (b - a))
    return path_matrix(rays, grid)


def cgls(A: sparse.csr_matrix, b: np.ndarray, iterations: int = 20
         ) -> np.ndarray:
    """Least-squares CG on min ||A x - b||, fixed iteration count, x0 = 0."""
    x = np.zeros(A.shape[1])
    r = b.astype(float).copy()
    s = A.T @ r
    d = s.copy()
    gamma = float(s @ s)
    for _ in range(iterations):
        if gamma == 0.0:
            break
        q = A @ d
        qq = float(q @ q)
        if qq == 0.0:
            break
        a = gamma / qq
        x += a * d
        r -= a * q
        s = A.T @ r
        gamma_new = float(s @ s)
        d = s + (gamma_new / gamma) * d
        gamma = gamma_new
    return x


# ---------------------------------------------------------------------------
# the outer TOF loop


def tof_invert(sinogram: TofSinogram, ring: TransducerRing, grid: Grid2D,
               iters: dict | None = None, c0: float = 1500.0,
               power_y: float = 2.0, window: int = 7,
               cg_iterations: int = 20, link: LinkConfig | None = None,
               callback=None) -> TofResult:
    """Bent-ray travel-time inversion of a TOF-discrepancy sinogram.

    iters is {"straight": n1, "bent": n2} (default 1 and 6). Straight
    iterations use emitter-receiver chords; bent iterations link rays in the
    current model (dispersion off: TOF sees geometry only). Each iteration
    solves J dn = dt_res for a slowness perturbation with cg_iterations CGLS
    steps, smooths it with `window`, and keeps the model with the lowest
    sinogram misfit.
    """
    iters = {"straight": 1, "bent": 6, **(iters or {})}
    if sinogram.n_valid < 0.8 * sinogram.mask.size:
        raise ConfigError(
            f"only {sinogram.n_valid}/{sinogram.mask.size} sinogram entries "
            "are valid; need at least 80%")
    link = link or LinkConfig(ds=grid.spacing, tol=1e-3 * grid.spacing,
                              smoothing_window=window)
    pairs = [(e, r) for e in range(ring.n_emitters)
             for r in range(ring.n_receivers) if sinogram.mask[r, e]]
    dt_obs = np.array([sinogram.tof[r, e] for e, r in pairs])

    medium = Medium(ScalarField(grid, np.full(grid.shape, c0)), None,
                    power_y, c0)
    n0 = 1.0 / c0
    lo, hi = SOUND_SPEED_BAND
    omega_link = 2.0 * np.pi * 1.0e6  # alpha = 0 makes the rays achromatic

    state = {"warm": None, "straight_J": None}

    def system(med, kind):
        """(J, dt_obs_rows, dt_model) for the scheduled geometry."""
        if kind == "straight":
            if state["straight_J"] is None:
                state["straight_J"] = straight_path_matrix(ring, grid, pairs)
            J, rows = state["straight_J"], dt_obs
        else:
            linked = link_all(med, omega_link, ring, link, warm=state["warm"])
            state["warm"] = linked
            ok = [i for i, (e, r) in enumerate(pairs) if linked.ok[e, r]]
            J = path_matrix([linked.rays[pairs[i][0], pairs[i][1]].points
                             for i in ok], grid)
            rows = dt_obs[ok]
        lengths = np.asarray(J.sum(axis=1)).ravel()
        model = J @ med.slowness.coefficients.ravel() - lengths * n0
        return J, rows, model

    best = (np.inf, medium)
    result = TofResult(medium)
    schedule = ["straight"] * iters["straight"] + ["bent"] * iters["bent"]
    for it, kind in enumerate(schedule):
        J, rows, model = system(medium, kind)
        res = rows - model
        misfit = float(np.linalg.norm(res))
        if misfit < best[0]:
            best = (misfit, medium)
        dn = cgls(J, res, cg_iterations).reshape(grid.shape)
        dn_s = smooth_field(ScalarField(grid, dn), window).coefficients
        n_new = medium.slowness.coefficients + dn_s
        c_new = np.clip(1.0 / np.maximum(n_new, 1.0 / hi), lo, hi)
        medium = Medium(ScalarField(grid, c_new), None, power_y, c0)
        entry = {"iteration": it, "kind": kind, "misfit": misfit,
                 "step_max": float(np.abs(dn_s).max())}
        result.history.append(entry)
        if callback is not None:
            callback(entry, medium)

    # score the final model with the last scheduled geometry
    if schedule:
        _, rows, model = system(medium, schedule[-1])
        final = float(np.linalg.norm(rows - model))
        result.history.append({"iteration": len(schedule), "kind": "final",
                               "misfit": final, "step_max": 0.0})
        if final < best[0]:
            best = (final, medium)
    result.medium = best[1]
    return result
