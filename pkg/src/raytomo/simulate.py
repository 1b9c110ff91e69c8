"""Synthetic-data harness: boundary spectra and band-limited time traces.

Simulation runs the same ray forward model as the inversion, but on a finer
grid with its own step size, its own geometry-smoothing cell count (a fixed
physical smoothing length converted on the simulation grid), and
bracketing-only ray linking with no warm start, so the discretization
(though not the physics) of the data differs from anything the inversion
ever computes. This is stated prominently in the README: the data contain no
scattered energy beyond the ray approximation, so absolute image quality
claims must not be read off these experiments; relative comparisons (TOF vs
waveform, frequency schedules, absorption variants) are the meaningful
outputs.

Noise: complex white Gaussian added per spectral entry, scaled so that
20 log10(peak |p| / sigma_noise) equals the configured SNR; time traces get
their own independent white noise against the peak trace amplitude.

Ray geometry is traced once at a representative frequency (the source center
frequency). With y = 2 the rays are exactly achromatic; otherwise the
absorption term steers k by well under a percent of the sound-speed
refraction at these parameters, so one geometry serves the whole band, while
phases, spreading anchors and attenuation keep their exact per-frequency
values through the frequency-separable ray integrals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import ConfigError, Grid2D
from .greens import SourceSpectrum, SpectraSet, pair_tables, spectra_from_tables
from .medium import Medium, TransducerRing
from .rays import LinkConfig, link_all
from .tof import TimeSeriesSet

__all__ = ["SimConfig", "simulate_data", "synthesize_timeseries"]


@dataclass
class SimConfig:
    """Simulation parameters.

    snr_db = None or inf disables noise. fine_grid, when given, pins the grid
    the truth must live on (the caller's statement of intent that this grid
    is finer than whatever reconstruction will follow). smoothing_length is
    the physical extent of the geometry-field smoothing, converted to an odd
    cell count on the simulation grid; the default 24 mm is the tracer
    stabilization scale of the desk configuration, so simulation and
    reconstruction trace comparably smooth geometries while their windows,
    grids, and step sizes stay distinct. sample_rate/n_samples control the
    optional time-trace synthesis (52.8 MHz, 8192 samples by default: 155 us
    of signal, comfortably past the longest ring crossing).
    """

    fine_grid: Grid2D | None = None
    source: SourceSpectrum = field(default_factory=SourceSpectrum)
    snr_db: float | None = 40.0
    seed: int = 0
    ray_step: float | None = None        # default: the fine grid's spacing
    link_tol_rel: float = 1e-4           # miss tolerance / grid spacing
    geometry_freq: float | None = None   # default: source center frequency
    smoothing_length: float = 0.024      # geometry-smoothing extent, meters
    sample_rate: float = 52.8e6
    n_samples: int = 8192

    def __post_init__(self):
        if self.snr_db is not None and not self.snr_db > 0:
            raise ConfigError("snr_db must be positive (None/inf: noiseless)")
        if self.smoothing_length < 0:
            raise ConfigError("smoothing_length must be >= 0")

    @property
    def noisy(self) -> bool:
        return self.snr_db is not None and np.isfinite(self.snr_db)

    def smoothing_window(self, spacing: float) -> int:
        """Odd cell count covering smoothing_length on a grid of `spacing`."""
        return max(1, 2 * round(self.smoothing_length / (2.0 * spacing)) + 1)


def _noise_sigma(values: np.ndarray, snr_db: float) -> float:
    peak = float(np.abs(values).max())
    return peak * 10.0 ** (-snr_db / 20.0)


def simulate_data(truth: Medium, ring: TransducerRing, frequencies,
                  cfg: SimConfig | None = None, with_timeseries: bool = False):
    """Boundary spectra (and optionally time traces) for a known medium.

    Returns (SpectraSet, TimeSeriesSet | None). Raises LinkFailure if more
    than 1% of the pairs fail to link on the fine grid.
    """
    cfg = cfg or SimConfig()
    freqs = np.atleast_1d(np.asarray(frequencies, dtype=float))
    grid = truth.grid
    if cfg.fine_grid is not None and not grid.same_geometry(cfg.fine_grid):
        raise ConfigError("truth medium is not defined on the configured "
                          "simulation grid")
    ds = cfg.ray_step or grid.spacing
    f_geom = cfg.geometry_freq or cfg.source.center_freq
    window = cfg.smoothing_window(grid.spacing)
    # bracketing-only linking, cold start: nothing here shares a code path
    # with the warm secant linking the inversion uses
    link = LinkConfig(ds=ds, tol=cfg.link_tol_rel * grid.spacing,
                      smoothing_window=window, method="regula-falsi")
    linked = link_all(truth, 2.0 * np.pi * f_geom, ring, link)
    tables = pair_tables(truth, linked)

    spectra = spectra_from_tables(tables, truth, ring, cfg.source, freqs)
    rng_spec, rng_time = [np.random.default_rng(s) for s in
                          np.random.SeedSequence(cfg.seed).spawn(2)]
    if cfg.noisy:
        sigma = _noise_sigma(spectra.values, cfg.snr_db)
        noise = (rng_spec.standard_normal(spectra.values.shape)
                 + 1j * rng_spec.standard_normal(spectra.values.shape))
        spectra.values += sigma / np.sqrt(2.0) * noise * spectra.mask

    spectra.provenance = {
        "generator": "ray-forward",
        "grid_spacing": grid.spacing,
        "grid_shape": list(grid.shape),
        "ray_step": ds,
        "smoothing_window": window,
        "smoothing_length": cfg.smoothing_length,
        "link_method": "regula-falsi",
        "geometry_freq": f_geom,
        "snr_db": cfg.snr_db,
        "seed": cfg.seed,
        "n_link_failures": linked.n_failed,
    }

    series = None
    if with_timeseries:
        series = synthesize_timeseries(tables, truth, ring, cfg, rng_time)
    return spectra, series


def synthesize_timeseries(tables: dict, medium: Medium, ring: TransducerRing,
                          cfg: SimConfig, rng=None) -> TimeSeriesSet:
    """Band-limited time traces by inverse FFT of the per-pair ray spectra.

    The analysis convention is p(omega) = int p(t) exp(+i omega t) dt, so the
    real trace is irfft of the conjugated positive-frequency samples divided
    by dt. The zero-frequency bin is zero by construction (the tone burst has
    no DC component and the spectrum carries it explicitly).
    """
    nt = int(cfg.n_samples)
    dt = 1.0 / cfg.sample_rate
    f_bins = np.fft.rfftfreq(nt, dt)
    spec = spectra_from_tables(tables, medium, ring, cfg.source, f_bins[1:])
    full = np.zeros((len(f_bins),) + spec.values.shape[1:],
                    dtype=np.complex128)
    full[1:] = spec.values
    samples = np.fft.irfft(np.conj(full), n=nt, axis=0) / dt
    if cfg.noisy:
        if rng is None:
            rng = np.random.default_rng(cfg.seed + 1)
        sigma = float(np.abs(samples).max()) * 10.0 ** (-cfg.snr_db / 20.0)
        samples = samples + sigma * rng.standard_normal(samples.shape)
    return TimeSeriesSet(samples=samples, dt=dt, t0=0.0, ring=ring)
