"""On-disk formats: JSON headers paired with raw little-endian binary blocks.

Every dataset is a `<name>.json` header next to a `<name>.bin` payload. The
header carries geometry and layout; the payload is raw float64 (row-major,
little-endian) with block offsets recorded in the header, so a truncated or
mismatched file fails with the exact byte range that was expected. Writes are
atomic (temp file + os.replace), payload first, header last — a visible
header always references a complete payload.

Absorption coefficients live in files in the conventional
dB MHz^-y cm^-1 units and are converted to internal Np-based units on load
(the medium header stores the power-law exponent needed for the conversion).
"""

from __future__ import annotations

import getpass
import hashlib
import json
import os
import platform
import tempfile
import time

import numpy as np

from . import __version__
from .grids import Grid2D, ScalarField
from .greens import SpectraSet
from .medium import (Medium, TransducerRing, alpha0_db_to_internal,
                     alpha0_internal_to_db)
from .rays import LinkedRaySet, Ray

__all__ = [
    "FormatError",
    "load_field",
    "load_linked_rays",
    "load_manifest",
    "load_medium",
    "load_sinogram",
    "load_spectra",
    "load_timeseries",
    "save_field",
    "save_linked_rays",
    "save_manifest",
    "save_medium",
    "save_sinogram",
    "save_spectra",
    "save_timeseries",
    "sha256_file",
    "write_manifest",
]


class FormatError(ValueError):
    """A file does not match its declared format."""


# ---------------------------------------------------------------------------
# primitives


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def _atomic_write_bytes(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _paths(path: str) -> tuple[str, str]:
    """Normalize a dataset path to its (header, payload) pair."""
    base, ext = os.path.splitext(path)
    if ext not in ("", ".json", ".bin"):
        base = path
    return base + ".json", base + ".bin"


def _load_header(hpath: str) -> dict:
    try:
        raw = open(hpath, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"{hpath}: no such file") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{hpath}: invalid JSON at byte {e.pos}: {e.msg}") from None


def _require(header: dict, hpath: str, *keys):
    for k in keys:
        if k not in header:
            raise FormatError(f"{hpath}: missing required key {k!r}")
    return [header[k] for k in keys]


class _BlockWriter:
    """Accumulates binary blocks and their header descriptors."""

    def __init__(self):
        self.chunks = []
        self.blocks = []
        self.offset = 0

    def add(self, name: str, array: np.ndarray) -> None:
        data = np.ascontiguousarray(array)
        if data.dtype == np.complex128:  # interleaved re/im float64
            data = data.view(np.float64)
        raw = data.astype("<" + data.dtype.str[1:], copy=False).tobytes()
        self.blocks.append({"name": name, "offset": self.offset,
                            "dtype": data.dtype.name, "count": data.size})
        self.chunks.append(raw)
        self.offset += len(raw)

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def _read_block(payload: bytes, block: dict, bpath: str) -> np.ndarray:
    dtype = np.dtype(block["dtype"]).newbyteorder("<")
    off, count = int(block["offset"]), int(block["count"])
    nbytes = count * dtype.itemsize
    if off + nbytes > len(payload):
        raise FormatError(
            f"{bpath}: block {block['name']!r} expects bytes "
            f"[{off}, {off + nbytes}) but the file has {len(payload)} bytes")
    return np.frombuffer(payload, dtype=dtype, count=count, offset=off)


def _find_block(header: dict, name: str, hpath: str) -> dict:
    for b in header.get("blocks", []):
        if b.get("name") == name:
            return b
    raise FormatError(f"{hpath}: no block named {name!r}")


def _write_dataset(path: str, header: dict, writer: _BlockWriter) -> None:
    hpath, bpath = _paths(path)
    header = dict(header)
    header["format_version"] = 1
    header["blocks"] = writer.blocks
    header["data"] = os.path.basename(bpath)
    payload = writer.payload()
    header["byte_length"] = len(payload)
    _atomic_write_bytes(bpath, payload)
    _atomic_write_bytes(hpath, json.dumps(
        header, indent=2, default=_json_default).encode() + b"\n")


def _read_dataset(path: str, kind: str) -> tuple[dict, bytes, str, str]:
    hpath, bpath = _paths(path)
    header = _load_header(hpath)
    if header.get("kind") != kind:
        raise FormatError(
            f"{hpath}: kind {header.get('kind')!r}, expected {kind!r}")
    try:
        payload = open(bpath, "rb").read()
    except FileNotFoundError:
        raise FormatError(f"{bpath}: payload file missing") from None
    declared = header.get("byte_length")
    if declared is not None and declared != len(payload):
        raise FormatError(
            f"{bpath}: header declares {declared} bytes, found {len(payload)}")
    return header, payload, hpath, bpath


def _grid_meta(grid: Grid2D) -> dict:
    return {"shape": list(grid.shape), "spacing_m": grid.spacing,
            "origin_m": list(grid.origin), "order": "row-major",
            "endianness": "little"}


def _grid_from_meta(header: dict, hpath: str) -> Grid2D:
    shape, spacing, origin = _require(header, hpath, "shape", "spacing_m",
                                      "origin_m")
    return Grid2D(tuple(int(n) for n in shape), float(spacing),
                  (float(origin[0]), float(origin[1])))


def _ring_meta(ring: TransducerRing) -> dict:
    return {"center": list(ring.center), "radius": ring.radius,
            "emitters": ring.emitters.tolist(),
            "receivers": ring.receivers.tolist()}


def _ring_from_meta(meta: dict) -> TransducerRing:
    return TransducerRing(center=(float(meta["center"][0]),
                                  float(meta["center"][1])),
                          radius=float(meta["radius"]),
                          emitters=np.asarray(meta["emitters"], dtype=float),
                          receivers=np.asarray(meta["receivers"], dtype=float))


# ---------------------------------------------------------------------------
# scalar fields and media


def save_field(path: str, field: ScalarField, quantity: str = "field",
               units: str = "") -> None:
    """Write a scalar field (its node coefficients) as header + payload."""
    w = _BlockWriter()
    w.add("coefficients", field.coefficients)
    header = {"kind": "field", "quantity": quantity, "units": units,
              "dtype": "f64", **_grid_meta(field.grid)}
    _write_dataset(path, header, w)


def load_field(path: str) -> ScalarField:
    header, payload, hpath, bpath = _read_dataset(path, "field")
    grid = _grid_from_meta(header, hpath)
    block = _find_block(header, "coefficients", hpath)
    coeffs = _read_block(payload, block, bpath)
    n = grid.shape[0] * grid.shape[1]
    if coeffs.size != n:
        raise FormatError(f"{bpath}: {coeffs.size} coefficients for grid "
                          f"shape {header['shape']} ({n} expected)")
    return ScalarField(grid, coeffs.reshape(grid.shape).copy())


def save_medium(path: str, medium: Medium) -> None:
    """Write a medium: sound-speed nodes (m/s) and absorption nodes
    (dB MHz^-y cm^-1) in one payload."""
    w = _BlockWriter()
    w.add("sound_speed", medium.sound_speed.coefficients)
    w.add("alpha0", alpha0_internal_to_db(medium.alpha0.coefficients,
                                          medium.power_y))
    header = {"kind": "medium", "power_y": medium.power_y, "c0": medium.c0,
              "units": {"sound_speed": "m/s",
                        "alpha0": "dB/(MHz^y cm)"},
              **_grid_meta(medium.sound_speed.grid)}
    _write_dataset(path, header, w)


def load_medium(path: str) -> Medium:
    header, payload, hpath, bpath = _read_dataset(path, "medium")
    grid = _grid_from_meta(header, hpath)
    (y,) = _require(header, hpath, "power_y")
    c0 = float(header.get("c0", 1500.0))
    n = grid.shape[0] * grid.shape[1]
    fields = {}
    for name in ("sound_speed", "alpha0"):
        arr = _read_block(payload, _find_block(header, name, hpath), bpath)
        if arr.size != n:
            raise FormatError(f"{bpath}: block {name!r} has {arr.size} values, "
                              f"{n} expected")
        fields[name] = arr.reshape(grid.shape).copy()
    a0 = alpha0_db_to_internal(fields["alpha0"], float(y))
    return Medium(ScalarField(grid, fields["sound_speed"]),
                  alpha0=ScalarField(grid, a0), power_y=float(y), c0=c0)


# ---------------------------------------------------------------------------
# spectra and time series


def save_spectra(path: str, spectra: SpectraSet) -> None:
    w = _BlockWriter()
    w.add("values", spectra.values)          # interleaved re/im, omega-major
    w.add("mask", spectra.mask.astype(np.uint8))
    header = {"kind": "spectra",
              "frequencies_hz": spectra.frequencies.tolist(),
              "layout": "omega, receiver, emitter; complex interleaved",
              "ring": _ring_meta(spectra.ring),
              "provenance": spectra.provenance}
    _write_dataset(path, header, w)


def load_spectra(path: str) -> SpectraSet:
    header, payload, hpath, bpath = _read_dataset(path, "spectra")
    freqs = np.asarray(header.get("frequencies_hz", []), dtype=float)
    ring = _ring_from_meta(header.get("ring", {}))
    shape = (len(freqs), ring.n_receivers, ring.n_emitters)
    vals = _read_block(payload, _find_block(header, "values", hpath), bpath)
    if vals.size != 2 * np.prod(shape):
        raise FormatError(f"{bpath}: values block has {vals.size} floats, "
                          f"{2 * int(np.prod(shape))} expected for {shape}")
    values = vals.view(np.complex128).reshape(shape).copy()
    mask = _read_block(payload, _find_block(header, "mask", hpath), bpath)
    return SpectraSet(freqs, ring, values,
                      mask.reshape(shape).astype(bool),
                      provenance=dict(header.get("provenance", {})))


def save_timeseries(path: str, times: np.ndarray, values: np.ndarray,
                    ring: TransducerRing, extra: dict | None = None) -> None:
    """Time traces p(t, r, e); `times` must be uniform."""
    times = np.asarray(times, dtype=float)
    dt = float(times[1] - times[0])
    if not np.allclose(np.diff(times), dt, rtol=0, atol=1e-9 * dt):
        raise FormatError("time axis must be uniformly sampled")
    w = _BlockWriter()
    w.add("values", np.asarray(values, dtype=np.float64))
    header = {"kind": "timeseries", "t0": float(times[0]), "dt": dt,
              "n_samples": len(times),
              "layout": "time, receiver, emitter",
              "ring": _ring_meta(ring)}
    if extra:
        header.update(extra)
    _write_dataset(path, header, w)


def load_timeseries(path: str):
    """Returns (times, values, ring, header)."""
    header, payload, hpath, bpath = _read_dataset(path, "timeseries")
    t0, dt, nt = _require(header, hpath, "t0", "dt", "n_samples")
    ring = _ring_from_meta(header.get("ring", {}))
    times = float(t0) + float(dt) * np.arange(int(nt))
    shape = (int(nt), ring.n_receivers, ring.n_emitters)
    vals = _read_block(payload, _find_block(header, "values", hpath), bpath)
    if vals.size != np.prod(shape):
        raise FormatError(f"{bpath}: values block has {vals.size} floats, "
                          f"{int(np.prod(shape))} expected for {shape}")
    return times, vals.reshape(shape).copy(), ring, header


def save_sinogram(path: str, sinogram, ring: TransducerRing) -> None:
    """TOF-discrepancy sinogram Δt(r, e) in seconds with its validity mask."""
    w = _BlockWriter()
    w.add("tof", np.where(sinogram.mask, sinogram.tof, 0.0))
    w.add("mask", sinogram.mask.astype(np.uint8))
    header = {"kind": "sinogram", "units": "s",
              "layout": "receiver, emitter",
              "ring": _ring_meta(ring)}
    _write_dataset(path, header, w)


def load_sinogram(path: str):
    """Returns (TofSinogram, ring)."""
    from .tof import TofSinogram

    header, payload, hpath, bpath = _read_dataset(path, "sinogram")
    ring = _ring_from_meta(header.get("ring", {}))
    shape = (ring.n_receivers, ring.n_emitters)
    tof = _read_block(payload, _find_block(header, "tof", hpath), bpath)
    mask = _read_block(payload, _find_block(header, "mask", hpath), bpath)
    if tof.size != np.prod(shape):
        raise FormatError(f"{bpath}: tof block has {tof.size} values, "
                          f"{int(np.prod(shape))} expected for {shape}")
    return (TofSinogram(tof.reshape(shape).copy(),
                        mask.reshape(shape).astype(bool)), ring)


# ---------------------------------------------------------------------------
# linked rays


def save_linked_rays(path: str, linked: LinkedRaySet) -> None:
    """Persist linked-ray geometry (points); field samples along the rays are
    medium-derived and are rebuilt on load."""
    pairs = linked.pairs()
    npts = np.array([linked.rays[p].n_points for p in pairs], dtype=np.int64)
    pts = (np.concatenate([linked.rays[p].points for p in pairs])
           if pairs else np.zeros((0, 2)))
    w = _BlockWriter()
    w.add("angles", linked.angles)
    w.add("miss", linked.miss)
    w.add("ok", linked.ok.astype(np.uint8))
    w.add("pair_e", np.array([p[0] for p in pairs], dtype=np.int64))
    w.add("pair_r", np.array([p[1] for p in pairs], dtype=np.int64))
    w.add("n_points", npts)
    w.add("ds_last", np.array([linked.rays[p].ds_last for p in pairs]))
    w.add("points", pts.ravel())
    header = {"kind": "linked_rays", "omega": linked.omega, "ds": linked.ds,
              "smoothing_window": linked.smoothing_window,
              "ring": _ring_meta(linked.ring)}
    _write_dataset(path, header, w)


def load_linked_rays(path: str, medium: Medium) -> LinkedRaySet:
    """Rebuild a LinkedRaySet; `medium` supplies the field samples along the
    stored geometry."""
    header, payload, hpath, bpath = _read_dataset(path, "linked_rays")
    omega, ds, window = _require(header, hpath, "omega", "ds",
                                 "smoothing_window")
    ring = _ring_from_meta(header.get("ring", {}))
    ne, nr = ring.n_emitters, ring.n_receivers
    rd = {name: _read_block(payload, _find_block(header, name, hpath), bpath)
          for name in ("angles", "miss", "ok", "pair_e", "pair_r",
                       "n_points", "ds_last", "points")}
    pts_flat = rd["points"].reshape(-1, 2)
    slow, a0f = medium.geometry_fields(1)  # raw fields for per-point samples
    wfac = medium.tan_factor * float(omega)**medium.power_y
    rays = {}
    start = 0
    miss_grid = rd["miss"].reshape(ne, nr)
    for e, r, n, dsl in zip(rd["pair_e"], rd["pair_r"], rd["n_points"],
                            rd["ds_last"]):
        pts = pts_flat[start:start + n].copy()
        start += n
        arc = np.empty(n)
        arc[0] = 0.0
        arc[1:] = np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
        seg = pts[1] - pts[0]
        s = slow.eval_many(pts)
        a = a0f.eval_many(pts)
        rays[(int(e), int(r))] = Ray(
            points=pts, arc=arc,
            theta0=float(np.arctan2(seg[1], seg[0])), ds=float(ds),
            ds_last=float(dsl), omega=float(omega), slowness_samples=s,
            alpha0_samples=a, k_samples=float(omega) * s + wfac * a,
            miss=float(miss_grid[int(e), int(r)]))
    if start != len(pts_flat):
        raise FormatError(f"{bpath}: points block holds {len(pts_flat)} points"
                          f" but the ray table consumes {start}")
    return LinkedRaySet(ring=ring, omega=float(omega), ds=float(ds),
                        rays=rays, angles=rd["angles"].reshape(ne, nr).copy(),
                        miss=miss_grid.copy(),
                        ok=rd["ok"].reshape(ne, nr).astype(bool),
                        smoothing_window=int(window))


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str, command: str, parameters: dict,
                   inputs=None, outputs: list | None = None) -> dict:
    """Record how an output was produced (command, parameters, input hashes).

    `inputs` is an iterable of paths; each is hashed with sha256.
    """
    manifest = {
        "tool": "raytomo",
        "version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "host": platform.node(),
        "user": getpass.getuser(),
        "command": command,
        "parameters": parameters,
        "inputs": {p: sha256_file(p) for p in (inputs or [])},
        "outputs": outputs or [],
    }
    _atomic_write_bytes(path, json.dumps(
        manifest, indent=2, default=_json_default).encode() + b"\n")
    return manifest


save_manifest = write_manifest


def load_manifest(path: str) -> dict:
    return _load_header(path)
