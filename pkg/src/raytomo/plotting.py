"""Figure helpers for maps, sinograms, ray fans, and convergence curves.

Everything renders through the Agg backend and writes straight to disk; no
interactive windows. Functions take an optional Axes so the demo scripts can
compose panels, and create/save a Figure themselves when given a path.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .grids import ScalarField  # noqa: E402
from .medium import Medium, TransducerRing  # noqa: E402

__all__ = [
    "plot_convergence",
    "plot_rays",
    "plot_sinogram",
    "plot_speed_map",
    "save_table_csv",
]


def _field_of(obj) -> ScalarField:
    return obj.sound_speed if isinstance(obj, Medium) else obj


def _extent(grid):
    a1, a2 = grid.axes()
    return (a2[0], a2[-1], a1[0], a1[-1])  # imshow draws axis-1 horizontally


def _draw_ring(ax, ring: TransducerRing):
    ax.plot(ring.emitters[:, 1], ring.emitters[:, 0], "^", ms=4,
            color="w", mec="k", label="emitters")
    ax.plot(ring.receivers[:, 1], ring.receivers[:, 0], "o", ms=3,
            color="k", mec="w", label="receivers")


def plot_speed_map(obj, path=None, title="sound speed", ring=None,
                   vmin=None, vmax=None, ax=None, cmap="viridis"):
    """Image of a sound-speed map (Medium or ScalarField) in m/s."""
    field = _field_of(obj)
    created = ax is None
    if created:
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(field.coefficients, origin="lower", cmap=cmap,
                   extent=_extent(field.grid), vmin=vmin, vmax=vmax)
    ax.set_xlabel("x2 (m)")
    ax.set_ylabel("x1 (m)")
    ax.set_title(title)
    plt.colorbar(im, ax=ax, label="m/s", shrink=0.85)
    if ring is not None:
        _draw_ring(ax, ring)
    if created and path is not None:
        ax.figure.savefig(path, dpi=140, bbox_inches="tight")
        plt.close(ax.figure)
    return ax


def plot_sinogram(sinogram, path=None, title="TOF discrepancy", ax=None):
    """Receiver-by-emitter image of pick differences in microseconds;
    masked entries are blanked."""
    created = ax is None
    if created:
        fig, ax = plt.subplots(figsize=(5.2, 4.2))
    shown = np.where(sinogram.mask, sinogram.tof * 1e6, np.nan)
    im = ax.imshow(shown, origin="lower", aspect="auto", cmap="RdBu_r")
    ax.set_xlabel("emitter index")
    ax.set_ylabel("receiver index")
    ax.set_title(title)
    plt.colorbar(im, ax=ax, label="$\\Delta t$ ($\\mu$s)", shrink=0.85)
    if created and path is not None:
        ax.figure.savefig(path, dpi=140, bbox_inches="tight")
        plt.close(ax.figure)
    return ax


def plot_rays(linked, path=None, medium=None, title="linked rays",
              every=1, ax=None):
    """Linked ray paths over an optional sound-speed background."""
    created = ax is None
    if created:
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
    if medium is not None:
        plot_speed_map(medium, ax=ax, title=title)
    pairs = linked.pairs()
    for (e, r) in pairs[::every]:
        pts = linked.rays[(e, r)].points
        ax.plot(pts[:, 1], pts[:, 0], color="k", lw=0.3, alpha=0.5)
    _draw_ring(ax, linked.ring)
    ax.set_title(title)
    ax.set_aspect("equal")
    if created and path is not None:
        ax.figure.savefig(path, dpi=140, bbox_inches="tight")
        plt.close(ax.figure)
    return ax


def plot_convergence(history, path=None, title="convergence", ax=None):
    """Misfit per batch (log scale) plus relative error when recorded."""
    created = ax is None
    if created:
        fig, ax = plt.subplots(figsize=(5.6, 3.8))
    misfit = [h["misfit"] for h in history]
    ax.semilogy(misfit, "o-", ms=3, label="misfit")
    ax.set_xlabel("batch")
    ax.set_ylabel("misfit")
    ax.set_title(title)
    if any("relative_error" in h for h in history):
        re = [h.get("relative_error", np.nan) for h in history]
        ax2 = ax.twinx()
        ax2.plot(re, "s--", ms=3, color="C3", label="relative error")
        ax2.set_ylabel("relative error (%)", color="C3")
    if created and path is not None:
        ax.figure.savefig(path, dpi=140, bbox_inches="tight")
        plt.close(ax.figure)
    return ax


def save_table_csv(path, rows, header=None):
    """Write a list of dicts (or sequences) as CSV."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if rows and isinstance(rows[0], dict):
            names = header or list(rows[0])
            w = csv.DictWriter(fh, fieldnames=names, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        else:
            w = csv.writer(fh)
            if header:
                w.writerow(header)
            w.writerows(rows)
