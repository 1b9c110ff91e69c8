"""Shared fixtures: small bench-scale setups sized for fast unit tests.

Session scope amortizes numba compilation and ray linking across tests.
"""

import numpy as np
import pytest

from raytomo import (
    EllipseInclusion,
    LinkConfig,
    TransducerRing,
    desk_grid,
    link_all,
    make_phantom,
    water_medium,
)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def grid32():
    return desk_grid(32, clearance=0.3)


@pytest.fixture(scope="session")
def grid64():
    return desk_grid(64)


@pytest.fixture(scope="session")
def ring_small():
    return TransducerRing.regular(8, 16, radius=0.095)


@pytest.fixture(scope="session")
def ring_desk():
    return TransducerRing.regular(16, 64, radius=0.095)


@pytest.fixture(scope="session")
def water32(grid32):
    return water_medium(grid32)


@pytest.fixture(scope="session")
def water64(grid64):
    return water_medium(grid64)


@pytest.fixture(scope="session")
def blob64(grid64):
    """+4% round inclusion with absorption, soft edge."""
    return make_phantom(grid64, 1500.0, 1.4, [
        EllipseInclusion(center=(0.012, -0.008), semi_axes=(0.028, 0.028),
                         speed=1560.0, alpha0_db=0.5, edge_width=0.004)])


@pytest.fixture(scope="session")
def linked_water64(water64, ring_small):
    cfg = LinkConfig(ds=water64.grid.spacing,
                     tol=1e-4 * water64.grid.spacing)
    return link_all(water64, 2 * np.pi * 1.0e6, ring_small, cfg)


@pytest.fixture(scope="session")
def linked_blob64(blob64, ring_small):
    cfg = LinkConfig(ds=blob64.grid.spacing, tol=1e-4 * blob64.grid.spacing,
                     smoothing_window=7)
    return link_all(blob64, 2 * np.pi * 1.0e6, ring_small, cfg)
