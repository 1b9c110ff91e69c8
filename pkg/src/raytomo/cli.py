"""Command-line pipeline: phantom -> simulate -> pick -> tof -> invert.

Each command reads and writes the package's documented file formats and
drops a JSON run manifest next to every output (same basename,
.manifest.json), recording parameters, input hashes, and per-stage metrics,
so a finished run can be audited or re-run bit-identically.

Typical session, bench scale:

    raytomo phantom --preset ellipse --nodes 255 --out truth
    raytomo simulate --medium truth --snr 40 --seed 1 --out data \\
        --timeseries traces --water-prefix water
    raytomo pick --traces traces --water water_traces --out sino
    raytomo tof --sinogram sino --nodes 64 --iters straight:1,bent:6 \\
        --out tof_model
    raytomo invert --spectra data --init tof_model --out recon \\
        --fmin 0.2e6 --fmax 1.5e6 --batch 4 --lmax 10
    raytomo metrics --image recon --truth truth
    raytomo plot speed recon recon.png
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import io
from .grids import ConfigError, ScalarField
from .greens import SourceSpectrum
from .inversion import (GriddingConfig, default_schedule, invert,
                        relative_error)
from .medium import (Medium, PHANTOM_PRESETS, TransducerRing, desk_grid,
                     make_phantom, phantom_preset, water_medium)
from .rays import LinkConfig
from .simulate import SimConfig, simulate_data
from .tof import (TimeSeriesSet, pick_first_arrival, tof_invert,
                  tof_sinogram)

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared argument groups


def _add_ring_args(p):
    g = p.add_argument_group("transducer ring")
    g.add_argument("--ring-radius", type=float, default=0.095,
                   help="ring radius in meters (default 0.095)")
    g.add_argument("--emitters", type=int, default=16)
    g.add_argument("--receivers", type=int, default=64)


def _ring_from(args) -> TransducerRing:
    return TransducerRing.regular(args.emitters, args.receivers,
                                  radius=args.ring_radius)


def _add_schedule_args(p):
    g = p.add_argument_group("frequency schedule")
    g.add_argument("--fmin", type=float, default=0.2e6,
                   help="lowest frequency in Hz (default 0.2e6)")
    g.add_argument("--fmax", type=float, default=1.5e6,
                   help="highest frequency in Hz (default 1.5e6)")
    g.add_argument("--nfreq", type=int, default=140,
                   help="number of frequencies (default 140)")


def _parse_iters(text: str) -> dict:
    """'straight:1,bent:6' -> {'straight': 1, 'bent': 6}"""
    out = {}
    for part in text.split(","):
        try:
            kind, count = part.split(":")
            out[kind.strip()] = int(count)
        except ValueError:
            raise ConfigError(f"cannot parse --iters part {part!r}; "
                              "expected e.g. straight:1,bent:6") from None
    unknown = set(out) - {"straight", "bent"}
    if unknown:
        raise ConfigError(f"unknown ray kinds in --iters: {sorted(unknown)}")
    return out


def _manifest(out_path: str, args, command: str, inputs=(), outputs=(),
              metrics=None):
    params = {k: v for k, v in vars(args).items() if k != "func"}
    if metrics:
        params["metrics"] = metrics
    io.write_manifest(out_path + ".manifest.json", command, params,
                      inputs=list(inputs), outputs=list(outputs))


def _resample_onto(field: ScalarField, grid) -> np.ndarray:
    """Spline-evaluate a field at another grid's nodes (clipped to the
    source interior) — used to compare maps across grids."""
    pts = grid.node_points()
    (lo1, hi1), (lo2, hi2) = field.grid.interior_bounds()
    pts[:, 0] = np.clip(pts[:, 0], lo1, hi1)
    pts[:, 1] = np.clip(pts[:, 1], lo2, hi2)
    return field.eval_many(pts).reshape(grid.shape)


def _truth_on(grid, truth_medium: Medium) -> np.ndarray:
    if truth_medium.grid.same_geometry(grid):
        return truth_medium.sound_speed.coefficients
    return _resample_onto(truth_medium.sound_speed, grid)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args):
    grid = desk_grid(args.nodes, args.ring_radius)
    if args.preset is not None:
        medium = phantom_preset(args.preset, grid, c0=args.c0,
                                power_y=args.power_y)
    else:
        medium = make_phantom(grid, args.c0, args.power_y)
    io.save_medium(args.out, medium)
    _manifest(args.out, args, "phantom", outputs=[args.out + ".json"])
    c = medium.sound_speed.coefficients
    print(f"phantom: {args.nodes}x{args.nodes} grid, "
          f"c in [{c.min():.1f}, {c.max():.1f}] m/s -> {args.out}")


def cmd_simulate(args):
    truth = io.load_medium(args.medium)
    ring = _ring_from(args)
    freqs = np.linspace(args.fmin, args.fmax, args.nfreq)
    snr = None if args.snr in (None, 0) else args.snr
    cfg = SimConfig(source=SourceSpectrum(), snr_db=snr, seed=args.seed,
                    smoothing_length=args.smoothing_length)
    t0 = time.time()
    spectra, series = simulate_data(truth, ring, freqs, cfg,
                                    with_timeseries=args.timeseries is not None)
    outputs = [args.out + ".json"]
    io.save_spectra(args.out, spectra)
    if series is not None:
        io.save_timeseries(args.timeseries, series.times, series.samples, ring)
        outputs.append(args.timeseries + ".json")
    made = [args.out]
    if args.water_prefix:
        water = water_medium(truth.grid, truth.c0, truth.power_y)
        wcfg = SimConfig(source=SourceSpectrum(), snr_db=snr,
                         seed=args.seed + 1,
                         smoothing_length=args.smoothing_length)
        wspec, wser = simulate_data(water, ring, freqs, wcfg,
                                    with_timeseries=series is not None)
        io.save_spectra(args.water_prefix + "_spectra", wspec)
        outputs.append(args.water_prefix + "_spectra.json")
        if wser is not None:
            io.save_timeseries(args.water_prefix + "_traces",
                               wser.times, wser.samples, ring)
            outputs.append(args.water_prefix + "_traces.json")
        made.append(args.water_prefix + "_*")
    _manifest(args.out, args, "simulate", inputs=[args.medium + ".json"],
              outputs=outputs,
              metrics={"seconds": time.time() - t0,
                       "link_failures": spectra.provenance["n_link_failures"]})
    print(f"simulate: {len(freqs)} frequencies x {ring.n_receivers}x"
          f"{ring.n_emitters} pairs, snr={snr} dB -> {', '.join(made)}")


def cmd_pick(args):
    times, values, ring, _ = io.load_timeseries(args.traces)
    wtimes, wvalues, wring, _ = io.load_timeseries(args.water)
    if args.decimate > 1:
        times, values = times[::args.decimate], values[::args.decimate]
        wtimes, wvalues = wtimes[::args.decimate], wvalues[::args.decimate]
    dt = times[1] - times[0]
    series = TimeSeriesSet(values, dt, t0=times[0], ring=ring)
    wseries = TimeSeriesSet(wvalues, wtimes[1] - wtimes[0], t0=wtimes[0],
                            ring=wring)
    picks, mask = pick_first_arrival(series, short=args.short,
                                     long=args.long, min_snr=args.min_snr)
    wpicks, wmask = pick_first_arrival(wseries, short=args.short,
                                       long=args.long, min_snr=args.min_snr)
    sino = tof_sinogram(picks, mask, wpicks, wmask)
    io.save_sinogram(args.out, sino, ring)
    _manifest(args.out, args, "pick",
              inputs=[args.traces + ".json", args.water + ".json"],
              outputs=[args.out + ".json"],
              metrics={"valid": sino.n_valid, "total": int(sino.mask.size)})
    print(f"pick: {sino.n_valid}/{sino.mask.size} valid entries -> {args.out}")


def cmd_tof(args):
    sino, ring = io.load_sinogram(args.sinogram)
    grid = desk_grid(args.nodes, ring.radius)
    t0 = time.time()
    result = tof_invert(sino, ring, grid, iters=_parse_iters(args.iters),
                        c0=args.c0, power_y=args.power_y, window=args.window)
    io.save_medium(args.out, result.medium)
    metrics = {"seconds": time.time() - t0, "history": result.history}
    if args.truth:
        truth = io.load_medium(args.truth)
        metrics["relative_error"] = relative_error(
            result.medium.sound_speed.coefficients, _truth_on(grid, truth),
            args.c0)
        print(f"tof: relative error {metrics['relative_error']:.2f}%")
    _manifest(args.out, args, "tof", inputs=[args.sinogram + ".json"],
              outputs=[args.out + ".json"], metrics=metrics)
    print(f"tof: {len(result.history) - 1} iterations, final misfit "
          f"{result.history[-1]['misfit']:.3e} -> {args.out}")


def cmd_invert(args):
    data = io.load_spectra(args.spectra)
    if args.init:
        medium0 = io.load_medium(args.init)
        grid = medium0.grid
    else:
        grid = desk_grid(args.nodes, data.ring.radius)
        medium0 = water_medium(grid, args.c0, args.power_y)
    if args.alpha_from:
        amed = io.load_medium(args.alpha_from)
        a = (amed.alpha0.coefficients if amed.grid.same_geometry(grid)
             else np.maximum(_resample_onto(amed.alpha0, grid), 0.0))
        medium0 = Medium(medium0.sound_speed, ScalarField(grid, a),
                         medium0.power_y, medium0.c0)
    schedule = default_schedule(args.fmin, args.fmax, args.nfreq,
                                args.batch, args.order)
    link = LinkConfig(ds=grid.spacing, tol=1e-4 * grid.spacing,
                      smoothing_window=args.window)
    truth_map = None
    if args.truth:
        truth_map = _truth_on(grid, io.load_medium(args.truth))
    t0 = time.time()
    result = invert(data, medium0, schedule=schedule,
                    source=SourceSpectrum(), link=link,
                    gridding=GriddingConfig(), l_max=args.lmax,
                    rho_min=args.rho_min, guard_slack=args.guard_slack,
                    truth=truth_map,
                    allow_inverse_crime=args.allow_inverse_crime)
    io.save_medium(args.out, result.medium)
    history = [{k: v for k, v in h.items() if k != "frequencies"}
               for h in result.history]
    metrics = {"seconds": time.time() - t0, "history": history}
    if truth_map is not None:
        metrics["relative_error"] = history[-1].get("relative_error")
        print(f"invert: final relative error {metrics['relative_error']:.2f}%")
    _manifest(args.out, args, "invert", inputs=[args.spectra + ".json"],
              outputs=[args.out + ".json"], metrics=metrics)
    print(f"invert: {len(history)} batches in {metrics['seconds']:.0f}s, "
          f"final misfit {history[-1]['misfit']:.3e} -> {args.out}")


def cmd_metrics(args):
    image = io.load_medium(args.image)
    truth = io.load_medium(args.truth)
    truth_map = _truth_on(image.grid, truth)
    mask = None
    if args.mask_radius:
        mask = image.grid.disc_mask((0.0, 0.0), args.mask_radius)
    re = relative_error(image.sound_speed.coefficients, truth_map,
                        args.c0, mask)
    out = {"relative_error_percent": re,
           "image": args.image, "truth": args.truth}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=2)
    print(json.dumps(out, indent=2))


def cmd_plot(args):
    from . import plotting

    if args.kind == "speed":
        medium = io.load_medium(args.infile)
        plotting.plot_speed_map(medium, args.outfile)
    elif args.kind == "sinogram":
        sino, _ = io.load_sinogram(args.infile)
        plotting.plot_sinogram(sino, args.outfile)
    elif args.kind == "convergence":
        manifest = io.load_manifest(args.infile)
        history = manifest["parameters"]["metrics"]["history"]
        plotting.plot_convergence(history, args.outfile)
    else:
        raise ConfigError(f"unknown plot kind {args.kind!r}")
    print(f"plot: {args.kind} -> {args.outfile}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="raytomo",
        description="Ring-array ultrasound tomography with a ray-based "
                    "Green's function forward model.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a sound-speed/absorption phantom")
    p.add_argument("--preset", choices=sorted(PHANTOM_PRESETS), default=None,
                   help="named inclusion layout (default: homogeneous water)")
    p.add_argument("--nodes", type=int, default=255,
                   help="grid nodes per axis (default 255: simulation-grade)")
    p.add_argument("--ring-radius", type=float, default=0.095)
    p.add_argument("--c0", type=float, default=1500.0)
    p.add_argument("--power-y", type=float, default=1.4)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="synthesize boundary spectra "
                       "(and optional time traces) from a phantom")
    p.add_argument("--medium", required=True, help="truth medium path prefix")
    p.add_argument("--snr", type=float, default=40.0,
                   help="SNR in dB against peak amplitude; 0 disables noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeseries", default=None,
                   help="also synthesize time traces to this path prefix")
    p.add_argument("--water-prefix", default=None,
                   help="also simulate the water reference to PREFIX_spectra "
                        "and PREFIX_traces")
    p.add_argument("--smoothing-length", type=float, default=0.024,
                   help="geometry-smoothing extent in meters, converted to "
                        "an odd cell count on the simulation grid")
    p.add_argument("--out", required=True)
    _add_ring_args(p)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pick", help="first-arrival picks -> TOF sinogram")
    p.add_argument("--traces", required=True, help="phantom traces prefix")
    p.add_argument("--water", required=True, help="water-reference traces prefix")
    p.add_argument("--short", type=int, default=10)
    p.add_argument("--long", type=int, default=50)
    p.add_argument("--min-snr", type=float, default=6.0)
    p.add_argument("--decimate", type=int, default=1,
                   help="keep every n-th sample before picking (default 1)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pick)

    p = sub.add_parser("tof", help="bent-ray travel-time inversion of a sinogram")
    p.add_argument("--sinogram", required=True)
    p.add_argument("--nodes", type=int, default=64,
                   help="reconstruction nodes per axis (default 64)")
    p.add_argument("--iters", default="straight:1,bent:6",
                   help="outer iterations per ray kind (default straight:1,bent:6)")
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--c0", type=float, default=1500.0)
    p.add_argument("--power-y", type=float, default=1.4)
    p.add_argument("--truth", default=None,
                   help="truth medium prefix, for relative-error reporting")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tof)

    p = sub.add_parser("invert", help="waveform inversion of boundary spectra")
    p.add_argument("--spectra", required=True)
    p.add_argument("--init", default=None,
                   help="initial medium prefix (default: homogeneous water)")
    p.add_argument("--nodes", type=int, default=64,
                   help="grid nodes when --init is not given")
    p.add_argument("--c0", type=float, default=1500.0)
    p.add_argument("--power-y", type=float, default=1.4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lmax", type=int, default=10)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--order", choices=("ascending", "descending"),
                   default="ascending")
    p.add_argument("--rho-min", type=float, default=0.5,
                   help="minimum trusted ratio of relinked to Born-predicted "
                        "misfit descent for a CG step to be accepted")
    p.add_argument("--guard-slack", type=float, default=0.05,
                   help="allowed relative rise of the previous batch's "
                        "misfit when accepting a step")
    p.add_argument("--truth", default=None)
    p.add_argument("--alpha-from", default=None,
                   help="hold the absorption map from this medium file fixed "
                        "during the inversion (e.g. the truth phantom)")
    p.add_argument("--allow-inverse-crime", action="store_true")
    p.add_argument("--out", required=True)
    _add_schedule_args(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("metrics", help="relative error of an image vs truth")
    p.add_argument("--image", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--c0", type=float, default=1500.0)
    p.add_argument("--mask-radius", type=float, default=None,
                   help="restrict the norm to a centered disc of this radius")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="render maps, sinograms, convergence curves")
    p.add_argument("kind", choices=("speed", "sinogram", "convergence"))
    p.add_argument("infile", help="input path prefix (manifest for convergence)")
    p.add_argument("outfile", help="output image path")
    p.set_defaults(func=cmd_plot)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, io.FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
