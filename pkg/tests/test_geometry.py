import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_drop.errors import GeometryError, ValidationError
from spectral_drop.geometry import (Box, Disc, DomainSpec, EdgeTag, build_mesh, check_density, check_truncation,
                                    relative_perimeter, smoothed_perimeter, truncation_mass, volume)
from spectral_drop.diagnostics import strip_isoperimetric_ratio

from conftest import box_chi, disc_chi


def edge_midpoints(mesh, tag):
    e = mesh.boundary_edges[mesh.edge_tags == tag]
    return 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])


def test_strip_structured_counts_and_tags():
    mesh = build_mesh(DomainSpec.strip(1.0), 0.25, Box(0, 0, 6, 1))
    assert mesh.n_cells == 192
    assert mesh.check() == []
    neu = edge_midpoints(mesh, EdgeTag.NEUMANN)
    art = edge_midpoints(mesh, EdgeTag.ARTIFICIAL)
    assert len(neu) == 48 and len(art) == 8
    assert np.all(np.isclose(neu[:, 1], 0) | np.isclose(neu[:, 1], 1))
    assert np.all(np.isclose(art[:, 0], 0) | np.isclose(art[:, 0], 6))


@pytest.mark.parametrize("h", [0.3, 0.17])
def test_half_plane_tags(h):
    mesh = build_mesh(DomainSpec.half_plane(), h, Box(-3, 0, 3, 3))
    assert mesh.check() == []
    neu = edge_midpoints(mesh, EdgeTag.NEUMANN)
    art = edge_midpoints(mesh, EdgeTag.ARTIFICIAL)
    assert np.allclose(neu[:, 1], 0)
    assert not np.any(np.isclose(art[:, 1], 0) & (np.abs(art[:, 0]) < 3 - 1e-9))
    assert np.isclose(mesh.edge_lengths[mesh.edge_boundary_tag == EdgeTag.NEUMANN].sum(), 6.0)


def test_sector_quarter_plane_tags():
    mesh = build_mesh(DomainSpec.sector(math.pi / 2), 0.1, Disc(0, 0, 2))
    assert mesh.check() == []
    neu = edge_midpoints(mesh, EdgeTag.NEUMANN)
    art = edge_midpoints(mesh, EdgeTag.ARTIFICIAL)
    on_ray = np.isclose(neu[:, 0], 0) | np.isclose(neu[:, 1], 0)
    assert on_ray.all()
    # clipping edges are chords of the radius-2 arc
    assert np.all(np.abs(np.hypot(*art.T) - 2) < 0.01)


@pytest.mark.parametrize("spec,trunc", [
    (DomainSpec.strip(1.0), Box(-1, 0, 1, 1)),
    (DomainSpec.half_plane(), Disc(0.3, 0, 1.2)),
    (DomainSpec.sector(0.6), Disc(0, 0, 1.5)),
    (DomainSpec.polygon([(0, 0), (2, 0), (2, 1), (1, 1.7), (0, 1)]), None),
    (DomainSpec.exterior_convex(parabola=(0.5, 0, 0)), Disc(1.0, 0.5, 1.0)),
    (DomainSpec.exterior_convex(obstacle=[(0, 0), (1, 0), (0.5, 0.8)]), Box(-1, -1, 2, 2)),
    (DomainSpec.convex_epigraph([-2, -1, 0, 1, 2], [2, 0.5, 0, 0.5, 2]), Box(-2, -0.5, 2, 2.5)),
])
def test_mesh_invariants_all_kinds(spec, trunc):
    h = 0.1
    mesh = build_mesh(spec, h, trunc)
    assert mesh.check() == []
    assert np.all(mesh.signed_areas > 0)
    assert mesh.edge_lengths.max() <= 1.5 * h
    # closed loops: every boundary vertex has exactly two boundary edges
    deg = np.bincount(mesh.boundary_edges.ravel(), minlength=mesh.n_vertices)
    assert set(np.unique(deg[deg > 0])) == {2}
    assert len(mesh.edge_tags) == len(mesh.boundary_edges)


def test_mesh_is_deterministic():
    spec = DomainSpec.half_plane()
    a = build_mesh(spec, 0.1, Disc(0, 0, 1))
    b = build_mesh(spec, 0.1, Disc(0, 0, 1))
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)
    assert np.array_equal(a.edge_tags, b.edge_tags)


def test_mesh_arrays_are_read_only(strip_mesh):
    with pytest.raises(ValueError):
        strip_mesh.vertices[0, 0] = 1.0


def test_domain_validation():
    with pytest.raises(ValidationError):
        DomainSpec.sector(2.0)
    with pytest.raises(ValidationError):
        DomainSpec.sector(0.0)
    with pytest.raises(ValidationError):
        DomainSpec.strip(-1.0)
    with pytest.raises(ValidationError):
        DomainSpec.convex_epigraph([0, 1, 2], [0, 1, 0])  # concave
    with pytest.raises(ValidationError):
        DomainSpec.polygon([(0, 0), (0, 1), (1, 1), (1, 0)])  # clockwise
    with pytest.raises(ValidationError):
        Box(0, 0, 0, 1)
    with pytest.raises(ValidationError):
        build_mesh(DomainSpec.strip(1.0), -0.1, Box(0, 0, 1, 1))
    with pytest.raises(ValidationError):
        DomainSpec.from_dict({"kind": "strip", "colour": "red"})


def test_empty_intersection_is_geometry_error():
    with pytest.raises(GeometryError):
        build_mesh(DomainSpec.half_plane(), 0.1, Box(-1, -3, 1, -1))


def test_unbounded_needs_truncation():
    with pytest.raises((ValidationError, GeometryError)):
        build_mesh(DomainSpec.half_plane(), 0.1)


def test_domain_dict_roundtrip():
    spec = DomainSpec.sector(0.7, truncation=Disc(0, 0, 2))
    assert DomainSpec.from_dict(spec.to_dict()) == spec


# ---------------------------------------------------------------- volume

@pytest.fixture(scope="module")
def unit_square():
    return build_mesh(DomainSpec.polygon([(0, 0), (1, 0), (1, 1), (0, 1)]), 0.125)


def test_volume_examples(unit_square):
    n = unit_square.n_cells
    assert volume(np.ones(n), unit_square) == pytest.approx(1.0, abs=1e-14)
    assert volume(np.zeros(n), unit_square) == 0.0
    half = box_chi(unit_square, -1, -1, 0.5, 2)
    assert half.sum() == n / 2
    assert volume(half, unit_square) == pytest.approx(0.5, abs=1e-14)


def test_density_checks(unit_square):
    n = unit_square.n_cells
    with pytest.raises(ValidationError):
        volume(np.ones(n + 1), unit_square)
    with pytest.raises(ValidationError):
        check_density(np.full(n, 1.5), unit_square)
    with pytest.raises(ValidationError):
        relative_perimeter(np.full(n, 0.5), unit_square)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_volume_is_linear(strip_mesh, seed, a):
    rng = np.random.default_rng(seed)
    c1, c2 = rng.random((2, strip_mesh.n_cells))
    lhs = volume(a * c1 + (1 - a) * c2, strip_mesh)
    rhs = a * volume(c1, strip_mesh) + (1 - a) * volume(c2, strip_mesh)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-14)


# ---------------------------------------------------------------- perimeter

def test_relative_perimeter_unit_block_in_strip():
    h = 1 / 16
    mesh = build_mesh(DomainSpec.strip(1.0), h, Box(-1, 0, 2, 1))
    chi = box_chi(mesh, 0, -1, 1, 2)
    assert relative_perimeter(chi, mesh) == pytest.approx(2.0, abs=h)


def test_relative_perimeter_half_disc_band_and_trend():
    r = 0.6
    vals = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        mesh = build_mesh(DomainSpec.half_plane(), h, Box(-1, 0, 1, 1))
        p = relative_perimeter(disc_chi(mesh, 0, 0, r), mesh)
        assert math.pi * r * 0.98 <= p <= 4 * r * math.pi / 2
        vals.append(p)
    # staircase perimeter settles toward a constant under refinement
    assert abs(vals[2] - vals[1]) <= abs(vals[1] - vals[0]) + 2 / 64


def test_smoothed_perimeter_is_close_to_arc():
    r = 0.6
    mesh = build_mesh(DomainSpec.half_plane(), 1 / 64, Box(-1, 0, 1, 1))
    assert smoothed_perimeter(disc_chi(mesh, 0, 0, r), mesh) == pytest.approx(math.pi * r, rel=0.03)


def test_full_polygon_has_zero_relative_perimeter(unit_square):
    assert relative_perimeter(np.ones(unit_square.n_cells), unit_square) == 0.0


def test_truncation_edges_count_for_filled_cells():
    mesh = build_mesh(DomainSpec.strip(1.0), 0.25, Box(0, 0, 2, 1))
    assert relative_perimeter(np.ones(mesh.n_cells), mesh) == pytest.approx(2.0)


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_complement_perimeter_in_bounded_polygon(unit_square, seed):
    chi = (np.random.default_rng(seed).random(unit_square.n_cells) < 0.5).astype(float)
    assert relative_perimeter(chi, unit_square) == pytest.approx(relative_perimeter(1 - chi, unit_square),
                                                                 rel=1e-12, abs=1e-14)


def test_structured_refinement_quadruples():
    counts = [build_mesh(DomainSpec.strip(1.0), h, Box(0, 0, 3, 1)).n_cells for h in (0.25, 0.125, 0.0625)]
    assert counts[1] == 4 * counts[0] and counts[2] == 4 * counts[1]


@pytest.fixture(scope="module")
def fine_strip():
    return build_mesh(DomainSpec.strip(1.0), 1 / 32, Box(-2, 0, 2, 1))


ISO_FACTORS = []


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(0, 1), st.floats(0.05, 0.6)), min_size=1, max_size=3))
def test_strip_isoperimetric(fine_strip, discs):
    x, y = fine_strip.centroids.T
    chi = np.zeros(fine_strip.n_cells, bool)
    for cx, cy, r in discs:
        chi |= (x - cx) ** 2 + (y - cy) ** 2 < r * r
    vol = volume(chi.astype(float), fine_strip)
    if vol == 0 or vol > 2 / math.pi:
        return
    ratio = strip_isoperimetric_ratio(chi.astype(float), fine_strip)
    ISO_FACTORS.append(ratio)
    assert ratio >= 1.0


# ---------------------------------------------------------------- truncation guard

def test_truncation_guard():
    mesh = build_mesh(DomainSpec.half_plane(), 1 / 16, Box(-1, 0, 1, 1))
    inner = disc_chi(mesh, 0, 0, 0.5)
    assert truncation_mass(inner, mesh) == 0.0
    assert check_truncation(inner, mesh)
    with pytest.warns(RuntimeWarning, match="truncation"):
        assert not check_truncation(np.ones(mesh.n_cells), mesh)
