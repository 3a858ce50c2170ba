import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spectral_drop.geometry import Box, Disc, DomainSpec, build_mesh
from spectral_drop.pde import assemble

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

J01 = 2.404825557695773  # mpmath.besseljzero(0, 1)


@pytest.fixture(scope="session")
def strip_mesh():
    return build_mesh(DomainSpec.strip(1.0), 1 / 16, Box(-0.5, 0.0, 4.5, 1.0))


@pytest.fixture(scope="session")
def strip_system(strip_mesh):
    return assemble(strip_mesh)


@pytest.fixture(scope="session")
def halfplane_mesh():
    return build_mesh(DomainSpec.half_plane(), 1 / 16, Box(-1.6, 0.0, 1.6, 1.6))


@pytest.fixture(scope="session")
def halfplane_system(halfplane_mesh):
    return assemble(halfplane_mesh)


@pytest.fixture(scope="session")
def sector_mesh():
    return build_mesh(DomainSpec.sector(math.pi / 4), 1 / 16, Disc(0.0, 0.0, 2.0))


def box_chi(mesh, x0, y0, x1, y1):
    x, y = mesh.centroids.T
    return ((x > x0) & (x < x1) & (y > y0) & (y < y1)).astype(float)


def disc_chi(mesh, cx, cy, r):
    x, y = mesh.centroids.T
    return ((x - cx) ** 2 + (y - cy) ** 2 < r * r).astype(float)


def rng_for(seed):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
