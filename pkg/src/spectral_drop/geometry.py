"""Containers, tagged triangulations of their truncations, and drop measures.

A container is described by a :class:`DomainSpec`.  Unbounded containers are
clipped by a truncation (:class:`Box` or :class:`Disc`); boundary edges of the
resulting mesh carry an :class:`EdgeTag` telling whether they lie on the
physical container boundary (Neumann/Robin side) or on the artificial cut.

Drops are density fields: one value in ``[0, 1]`` per triangle.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Optional, Union

import numpy as np
import shapely
import triangle
from scipy.spatial import cKDTree
from shapely.geometry import LineString, MultiLineString, Polygon
from shapely.geometry import box as shapely_box

from .errors import GeometryError, ValidationError

logger = logging.getLogger(__name__)

KINDS = ("strip", "half_plane", "sector", "polygon", "exterior_convex", "convex_epigraph")
UNBOUNDED_KINDS = ("strip", "half_plane", "sector", "exterior_convex", "convex_epigraph")

# boundary nodes are placed every BOUNDARY_SPACING * h along curved/oblique boundaries
BOUNDARY_SPACING = 0.8
# lattice points closer than LATTICE_CLEARANCE * h to the boundary are dropped
LATTICE_CLEARANCE = 0.5
MAX_EDGE_FACTOR = 1.5


class EdgeTag(IntEnum):
    NEUMANN = 0
    ARTIFICIAL = 1


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValidationError(f"truncation box must have positive area, got {self}")

    def polygon(self, h=None) -> Polygon:
        return shapely_box(self.x0, self.y0, self.x1, self.y1)

    @property
    def bounds(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def to_dict(self):
        return {"box": [self.x0, self.y0, self.x1, self.y1]}


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"truncation disc needs a positive radius, got {self.radius}")

    def polygon(self, h=None) -> Polygon:
        step = (h if h else self.radius / 16) / 8
        n = max(64, int(math.ceil(2 * math.pi * self.radius / step)))
        t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        return Polygon(np.column_stack([self.cx + self.radius * np.cos(t),
                                        self.cy + self.radius * np.sin(t)]))

    @property
    def bounds(self):
        r = self.radius
        return (self.cx - r, self.cy - r, self.cx + r, self.cy + r)

    def to_dict(self):
        return {"disc": [self.cx, self.cy, self.radius]}


Truncation = Union[Box, Disc]


def truncation_from_dict(data) -> Optional[Truncation]:
    if data is None:
        return None
    if isinstance(data, (Box, Disc)):
        return data
    if not isinstance(data, dict) or len(data) != 1:
        raise ValidationError(f"truncation must be {{'box': [...]}} or {{'disc': [...]}}, got {data!r}")
    (key, val), = data.items()
    if key == "box" and len(val) == 4:
        return Box(*map(float, val))
    if key == "disc" and len(val) == 3:
        return Disc(*map(float, val))
    raise ValidationError(f"cannot parse truncation {data!r}")


def _is_convex_ccw(pts: np.ndarray) -> bool:
    d1 = np.roll(pts, -1, axis=0) - pts
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross > 0))


@dataclass(frozen=True)
class DomainSpec:
    """Symbolic container description.

    ``kind`` selects which of the optional fields are meaningful:

    * ``strip``: ``width`` (the strip is ``R x (0, width)``)
    * ``half_plane``: ``{y > 0}``
    * ``sector``: half-opening ``alpha``; ``{r > 0, |theta| < alpha}``
    * ``polygon``: ``vertices`` of a simple counterclockwise polygon
    * ``exterior_convex``: complement of a convex ``obstacle`` polygon, or of
      the epigraph ``{y >= a x^2 + b x + c}`` given by ``parabola=(a, b, c)``
    * ``convex_epigraph``: ``{y > phi(x)}`` with ``phi`` piecewise linear
      through ``profile=(xs, ys)``, extended linearly past the end samples
    """

    kind: str
    width: Optional[float] = None
    alpha: Optional[float] = None
    vertices: Optional[tuple] = None
    obstacle: Optional[tuple] = None
    parabola: Optional[tuple] = None
    profile: Optional[tuple] = None
    truncation: Optional[Truncation] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown domain kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "strip":
            if self.width is None or not self.width > 0:
                raise ValidationError("strip needs a positive width")
        elif self.kind == "sector":
            if self.alpha is None or not (0 < self.alpha <= math.pi / 2 + 1e-15):
                raise ValidationError("sector half-opening alpha must lie in (0, pi/2]")
        elif self.kind == "polygon":
            pts = np.asarray(self.vertices, dtype=float)
            if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
                raise ValidationError("polygon needs at least three 2-D vertices")
            ring = shapely.LinearRing(pts)
            if not ring.is_simple:
                raise ValidationError("polygon is not simple")
            if not ring.is_ccw:
                raise ValidationError("polygon vertices must be counterclockwise")
        elif self.kind == "exterior_convex":
            if (self.obstacle is None) == (self.parabola is None):
                raise ValidationError("exterior_convex needs exactly one of obstacle / parabola")
            if self.obstacle is not None:
                pts = np.asarray(self.obstacle, dtype=float)
                if pts.ndim != 2 or pts.shape[0] < 3 or not _is_convex_ccw(pts):
                    raise ValidationError("obstacle must be a strictly convex counterclockwise polygon")
            elif len(self.parabola) != 3 or not self.parabola[0] > 0:
                raise ValidationError("parabola obstacle needs coefficients (a, b, c) with a > 0")
        elif self.kind == "convex_epigraph":
            if self.profile is None or len(self.profile) != 2:
                raise ValidationError("convex_epigraph needs profile=(xs, ys)")
            xs, ys = (np.asarray(p, dtype=float) for p in self.profile)
            if xs.shape != ys.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
                raise ValidationError("profile xs must be strictly increasing and match ys")
            slopes = np.diff(ys) / np.diff(xs)
            if np.any(np.diff(slopes) < -1e-12 * max(1.0, np.abs(slopes).max())):
                raise ValidationError("profile is not convex (negative second differences)")

    # constructors -----------------------------------------------------
    @classmethod
    def strip(cls, width=1.0, truncation=None):
        return cls("strip", width=float(width), truncation=truncation)

    @classmethod
    def half_plane(cls, truncation=None):
        return cls("half_plane", truncation=truncation)

    @classmethod
    def sector(cls, alpha, truncation=None):
        return cls("sector", alpha=float(alpha), truncation=truncation)

    @classmethod
    def polygon(cls, vertices, truncation=None):
        return cls("polygon", vertices=tuple(map(tuple, np.asarray(vertices, dtype=float))),
                   truncation=truncation)

    @classmethod
    def exterior_convex(cls, obstacle=None, parabola=None, truncation=None):
        if obstacle is not None:
            obstacle = tuple(map(tuple, np.asarray(obstacle, dtype=float)))
        if parabola is not None:
            parabola = tuple(float(p) for p in parabola)
        return cls("exterior_convex", obstacle=obstacle, parabola=parabola, truncation=truncation)

    @classmethod
    def convex_epigraph(cls, xs, ys, truncation=None):
        return cls("convex_epigraph", profile=(tuple(map(float, xs)), tuple(map(float, ys))),
                   truncation=truncation)

    @property
    def bounded(self) -> bool:
        return self.kind not in UNBOUNDED_KINDS

    def with_truncation(self, truncation):
        return DomainSpec(self.kind, self.width, self.alpha, self.vertices, self.obstacle,
                          self.parabola, self.profile, truncation)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("width", "alpha", "vertices", "obstacle", "parabola", "profile"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist() if name != "width" and name != "alpha" else val
        if self.truncation is not None:
            out["truncation"] = self.truncation.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        allowed = {"kind", "width", "alpha", "vertices", "obstacle", "parabola", "profile", "truncation"}
        unknown = set(data) - allowed
        if unknown:
            raise ValidationError(f"unknown domain keys: {sorted(unknown)}")
        if "kind" not in data:
            raise ValidationError("domain.kind is required")
        kw = dict(data)
        if kw["kind"] == "strip":
            kw.setdefault("width", 1.0)
        kw["truncation"] = truncation_from_dict(kw.get("truncation"))
        for name in ("vertices", "obstacle"):
            if kw.get(name) is not None:
                kw[name] = tuple(map(tuple, kw[name]))
        if kw.get("parabola") is not None:
            kw["parabola"] = tuple(kw["parabola"])
        if kw.get("profile") is not None:
            kw["profile"] = tuple(tuple(p) for p in kw["profile"])
        return cls(**kw)

    # geometry ---------------------------------------------------------
    def boundary_geometry(self, extent, h):
        """Return ``(D, dD)``: a polygon covering the container over ``extent``
        and the physical boundary as line geometry."""
        x0, y0, x1, y1 = extent
        pad = max(x1 - x0, y1 - y0) + 1.0
        X0, Y0, X1, Y1 = x0 - pad, y0 - pad, x1 + pad, y1 + pad
        if self.kind == "strip":
            w = self.width
            dom = shapely_box(X0, 0.0, X1, w)
            bnd = MultiLineString([[(X0, 0.0), (X1, 0.0)], [(X0, w), (X1, w)]])
        elif self.kind == "half_plane":
            dom = shapely_box(X0, 0.0, X1, Y1)
            bnd = LineString([(X0, 0.0), (X1, 0.0)])
        elif self.kind == "sector":
            far = 2.0 * max(abs(X0), abs(X1), abs(Y0), abs(Y1))
            a = self.alpha
            t = np.linspace(-a, a, 257)
            arc = np.column_stack([far * np.cos(t), far * np.sin(t)])
            dom = Polygon(np.vstack([[0.0, 0.0], arc]))
            bnd = MultiLineString([[(0.0, 0.0), tuple(arc[0])], [(0.0, 0.0), tuple(arc[-1])]])
        elif self.kind == "polygon":
            dom = Polygon(self.vertices)
            bnd = dom.exterior
        elif self.kind == "exterior_convex":
            if self.obstacle is not None:
                obs = Polygon(self.obstacle)
                dom = shapely_box(X0, Y0, X1, Y1).difference(obs)
                bnd = obs.exterior
            else:
                a, b, c = self.parabola
                n = max(16, int(math.ceil((X1 - X0) / (h / 8))))
                xs = np.linspace(X0, X1, n + 1)
                ys = a * xs**2 + b * xs + c
                ybot = min(Y0, ys.min() - 1.0)
                curve = np.column_stack([xs, ys])
                dom = Polygon(np.vstack([[[X0, ybot], [X1, ybot]], curve[::-1]]))
                bnd = LineString(curve)
        elif self.kind == "convex_epigraph":
            xs, ys = (np.asarray(p, dtype=float) for p in self.profile)
            sl, sr = (ys[1] - ys[0]) / (xs[1] - xs[0]), (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            gx = [X0] if X0 < xs[0] else []
            gy = [ys[0] + sl * (X0 - xs[0])] if X0 < xs[0] else []
            gx += list(xs)
            gy += list(ys)
            if X1 > xs[-1]:
                gx.append(X1)
                gy.append(ys[-1] + sr * (X1 - xs[-1]))
            curve = np.column_stack([gx, gy])
            ytop = max(Y1, curve[:, 1].max() + 1.0)
            dom = Polygon(np.vstack([curve, [[curve[-1, 0], ytop], [curve[0, 0], ytop]]]))
            bnd = LineString(curve)
        else:  # pragma: no cover - guarded in __post_init__
            raise ValidationError(self.kind)
        return dom, bnd


# ----------------------------------------------------------------------
# Mesh
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation with tagged boundary edges.

    Arrays are made read-only on construction; derived connectivity is cached.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    h: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("vertices", float), ("triangles", np.int64),
                            ("boundary_edges", np.int64), ("edge_tags", np.int8)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        cells = np.tile(np.arange(t.shape[0]), 3)
        local.sort(axis=1)
        edges, inverse = np.unique(local, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        edge_cells = np.full((edges.shape[0], 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = inv_sorted[1:] != inv_sorted[:-1]
        edge_cells[inv_sorted[first], 0] = cells[order[first]]
        edge_cells[inv_sorted[~first], 1] = cells[order[~first]]
        return edges, edge_cells

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def edge_cells(self) -> np.ndarray:
        """Cells on each side of :attr:`edges` (``-1`` for the outside)."""
        return self._edge_data[1]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    @cached_property
    def edge_boundary_tag(self) -> np.ndarray:
        """Tag of each unique edge; ``-1`` for interior edges."""
        n = self.n_vertices
        keys = self.edges[:, 0] * n + self.edges[:, 1]
        b = np.sort(self.boundary_edges, axis=1)
        bkeys = b[:, 0] * n + b[:, 1]
        pos = np.searchsorted(keys, bkeys)
        if np.any(pos >= keys.size) or np.any(keys[np.minimum(pos, keys.size - 1)] != bkeys):
            raise GeometryError("boundary edge list does not match the triangulation")
        tags = np.full(keys.size, -1, dtype=np.int8)
        tags[pos] = self.edge_tags
        return tags

    def tagged_vertices(self, tag: EdgeTag) -> np.ndarray:
        return np.unique(self.boundary_edges[self.edge_tags == tag])

    @cached_property
    def constrained_vertices(self) -> np.ndarray:
        """Vertices on artificial truncation edges (eliminated dofs)."""
        return self.tagged_vertices(EdgeTag.ARTIFICIAL)

    def scaled(self, s: float) -> "Mesh":
        return Mesh(self.vertices * s, self.triangles, self.boundary_edges, self.edge_tags,
                    self.h * s, dict(self.meta))

    def check(self) -> list:
        """Return a list of violated mesh invariants (empty when valid)."""
        problems = []
        if np.any(self.signed_areas <= 0):
            problems.append("non-positive triangle area")
        tags = self.edge_boundary_tag
        geometric = self.edge_cells[:, 1] < 0
        if np.any(geometric != (tags >= 0)):
            problems.append("geometric boundary and tagged edges differ")
        deg = np.bincount(self.boundary_edges.ravel(), minlength=self.n_vertices)
        if np.any(deg[np.unique(self.boundary_edges)] != 2):
            problems.append("boundary edges do not form closed loops")
        if self.edge_lengths.max() > MAX_EDGE_FACTOR * self.h * (1 + 1e-9):
            problems.append(f"max edge {self.edge_lengths.max():.4g} exceeds 1.5 h")
        return problems


# ----------------------------------------------------------------------
# Mesh generation
# ----------------------------------------------------------------------


def _region(spec: DomainSpec, truncation: Optional[Truncation], h: float):
    if truncation is None and not spec.bounded:
        raise GeometryError(f"{spec.kind} container is unbounded and needs a truncation")
    if truncation is not None:
        extent = truncation.bounds
    else:
        extent = Polygon(spec.vertices).bounds
    dom, bnd = spec.boundary_geometry(extent, h)
    region = dom if truncation is None else dom.intersection(truncation.polygon(h))
    if region.is_empty or region.area <= 1e-12 * h * h:
        raise GeometryError("truncation does not intersect the container")
    if region.geom_type != "Polygon":
        parts = [g for g in getattr(region, "geoms", []) if g.geom_type == "Polygon" and g.area > 1e-12]
        if len(parts) != 1:
            raise GeometryError("truncated container is not a single connected region")
        region = parts[0]
    return shapely.normalize(region), bnd


def _on_boundary(points: np.ndarray, bnd, tol: float) -> np.ndarray:
    return shapely.distance(shapely.points(points), bnd) < tol


def _structured(region: Polygon, bnd, h: float, tol: float) -> Mesh:
    x0, y0, x1, y1 = region.bounds
    nx = max(1, int(math.ceil((x1 - x0) / h - 1e-9)))
    ny = max(1, int(math.ceil((y1 - y0) / h - 1e-9)))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    v00, v10, v11, v01 = vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)
    even = (I + J) % 2 == 0
    t1 = np.where(even[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    t2 = np.where(even[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    tris = np.empty((2 * I.size, 3), dtype=np.int64)
    tris[0::2] = t1
    tris[1::2] = t2

    i = np.arange(nx)
    j = np.arange(ny)
    sides = [
        np.column_stack([vid(i, 0), vid(i + 1, 0)]),            # bottom
        np.column_stack([vid(nx, j), vid(nx, j + 1)]),          # right
        np.column_stack([vid(i + 1, ny), vid(i, ny)]),          # top
        np.column_stack([vid(0, j + 1), vid(0, j)]),            # left
    ]
    edges, tags = [], []
    for side in sides:
        mids = 0.5 * (verts[side[:, 0]] + verts[side[:, 1]])
        on = _on_boundary(mids, bnd, tol)
        edges.append(side)
        tags.append(np.where(on, EdgeTag.NEUMANN, EdgeTag.ARTIFICIAL))
    return Mesh(verts, tris, np.concatenate(edges), np.concatenate(tags), h,
                {"structured": True, "shape": (nx, ny)})


def _resample_ring(coords: np.ndarray, bnd, h: float, tol: float):
    """Resample one closed ring; returns node coordinates and per-segment tags."""
    pts = coords[:-1] if np.allclose(coords[0], coords[-1]) else coords
    # clipping can leave near-duplicate vertices (e.g. a disc sample on the cut line)
    gap = np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1)
    pts = pts[gap > 1e-6 * h]
    n = len(pts)
    nxt = np.roll(pts, -1, axis=0)
    seg_tag = np.where(_on_boundary(0.5 * (pts + nxt), bnd, tol)
                       & _on_boundary(pts, bnd, tol) & _on_boundary(nxt, bnd, tol),
                       EdgeTag.NEUMANN, EdgeTag.ARTIFICIAL)
    d_in = pts - np.roll(pts, 1, axis=0)
    d_out = nxt - pts
    turn = np.abs(np.arctan2(d_in[:, 0] * d_out[:, 1] - d_in[:, 1] * d_out[:, 0],
                             np.einsum("ij,ij->i", d_in, d_out)))
    corner = (seg_tag != np.roll(seg_tag, 1)) | (turn > math.radians(20.0))
    starts = np.flatnonzero(corner)
    if starts.size == 0:
        starts = np.array([0])
    nodes, tags = [], []
    for k, s in enumerate(starts):
        e = starts[(k + 1) % starts.size]
        idx = np.arange(s, e + (n if e <= s else 0) + 1) % n
        poly = pts[idx]
        seglen = np.linalg.norm(np.diff(poly, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seglen)])
        m = max(1, int(math.ceil(cum[-1] / (BOUNDARY_SPACING * h) - 1e-9)))
        t = np.linspace(0.0, cum[-1], m + 1)[:-1]
        nodes.append(np.column_stack([np.interp(t, cum, poly[:, 0]), np.interp(t, cum, poly[:, 1])]))
        tags.append(np.full(m, seg_tag[s], dtype=np.int8))
    return np.concatenate(nodes), np.concatenate(tags)


def _lattice(region: Polygon, h: float, origin, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    ext = np.asarray(region.exterior.coords)
    local = (ext - origin) @ rot
    (a, cmin), (b, dmax) = local.min(axis=0), local.max(axis=0)
    dy = h * math.sqrt(3) / 2
    js = np.arange(math.floor(cmin / dy) - 1, math.ceil(dmax / dy) + 2)
    is_ = np.arange(math.floor(a / h) - 2, math.ceil(b / h) + 3)
    I, J = np.meshgrid(is_, js)
    lx = I * h + (J % 2) * (h / 2)
    ly = J * dy
    pts = np.column_stack([lx.ravel(), ly.ravel()]) @ rot.T + origin
    return pts


def _unstructured(region: Polygon, bnd, h: float, tol: float, origin, angle) -> Mesh:
    node_blocks, seg_blocks, tag_blocks = [], [], []
    offset = 0
    for ring in [region.exterior, *region.interiors]:
        nodes, tags = _resample_ring(np.asarray(ring.coords), bnd, h, tol)
        m = len(nodes)
        idx = offset + np.arange(m)
        node_blocks.append(nodes)
        seg_blocks.append(np.column_stack([idx, np.roll(idx, -1)]))
        tag_blocks.append(tags)
        offset += m
    bnodes = np.concatenate(node_blocks)
    segs = np.concatenate(seg_blocks)
    stags = np.concatenate(tag_blocks)

    # dense boundary samples for clearance queries
    dense = []
    for ring in [region.exterior, *region.interiors]:
        line = LineString(ring.coords)
        k = max(8, int(math.ceil(line.length / (h / 4))))
        dense.append(shapely.get_coordinates(line.interpolate(np.linspace(0, line.length, k))))
    tree = cKDTree(np.concatenate(dense))

    lat = _lattice(region, h, np.asarray(origin, dtype=float), angle)
    inside = shapely.contains_xy(region, lat[:, 0], lat[:, 1])
    lat = lat[inside]
    dist, _ = tree.query(lat)
    lat = lat[dist >= LATTICE_CLEARANCE * h]

    holes = [Polygon(r).representative_point().coords[0] for r in region.interiors]
    extra = np.empty((0, 2))
    for _ in range(12):
        pts = np.vstack([bnodes, lat, extra])
        data = {"vertices": pts, "segments": segs}
        if holes:
            data["holes"] = np.asarray(holes)
        out = triangle.triangulate(data, "pQ")
        verts, tris = out["vertices"], out["triangles"].astype(np.int64)
        if verts.shape[0] != pts.shape[0]:
            raise GeometryError("constrained triangulation inserted unexpected points")
        e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        L = np.linalg.norm(verts[e[:, 1]] - verts[e[:, 0]], axis=1)
        long = L > MAX_EDGE_FACTOR * h * (1 - 1e-6)
        if not long.any():
            break
        extra = np.vstack([extra, 0.5 * (verts[e[long, 0]] + verts[e[long, 1]])])
    else:
        raise GeometryError("could not satisfy the edge-length bound")

    p = verts[tris]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - \
            (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = area2 < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    used = np.unique(tris)
    remap = np.full(verts.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    mesh = Mesh(verts[used], remap[tris], remap[segs], stags, h, {"structured": False})
    if np.any(mesh.areas < 1e-14 * h * h):
        raise GeometryError("degenerate triangle produced")
    return mesh


def build_mesh(spec: DomainSpec, h: float, truncation: Optional[Truncation] = None, *,
               lattice_origin=(0.0, 0.0), lattice_angle: float = 0.0,
               structured: Optional[bool] = None) -> Mesh:
    """Triangulate the container clipped by ``truncation`` (default ``spec.truncation``).

    Axis-aligned rectangular regions get a structured grid of squares split
    into two triangles with alternating diagonals.  Other regions are meshed
    by a constrained Delaunay triangulation of boundary nodes (spacing
    ``0.8 h``) and an equilateral lattice of side ``h`` anchored at
    ``lattice_origin`` and rotated by ``lattice_angle``.
    """
    if not h > 0:
        raise ValidationError(f"mesh size h must be positive, got {h}")
    truncation = truncation if truncation is not None else spec.truncation
    region, bnd = _region(spec, truncation, h)
    scale = max(region.bounds[2] - region.bounds[0], region.bounds[3] - region.bounds[1])
    tol = 1e-9 * max(scale, 1.0)
    rect = region.equals_exact(shapely.normalize(shapely_box(*region.bounds)), tol) or \
        abs(region.area - shapely_box(*region.bounds).area) < 1e-12 * scale * scale
    if structured is None:
        structured = rect and lattice_angle == 0.0
    if structured and not rect:
        raise GeometryError("structured meshing needs an axis-aligned rectangular region")
    mesh = _structured(region, bnd, h, tol) if structured else \
        _unstructured(region, bnd, h, tol, lattice_origin, lattice_angle)
    mesh.meta.update(kind=spec.kind)
    logger.debug("meshed %s: %d vertices, %d triangles", spec.kind, mesh.n_vertices, mesh.n_cells)
    return mesh


# ----------------------------------------------------------------------
# Density fields and measures
# ----------------------------------------------------------------------


def check_density(chi, mesh: Mesh, binary: bool = False) -> np.ndarray:
    chi = np.asarray(chi, dtype=float)
    if chi.shape != (mesh.n_cells,):
        raise ValidationError(f"density has shape {chi.shape}, mesh has {mesh.n_cells} cells")
    if not np.all(np.isfinite(chi)) or chi.min(initial=0) < -1e-12 or chi.max(initial=0) > 1 + 1e-12:
        raise ValidationError("density values must lie in [0, 1]")
    if binary and not np.all((np.abs(chi) < 1e-12) | (np.abs(chi - 1) < 1e-12)):
        raise ValidationError("density must be binary (0/1) here")
    return chi


def volume(chi, mesh: Mesh) -> float:
    """Measure of the drop: sum of density times cell area."""
    chi = check_density(chi, mesh)
    return float(chi @ mesh.areas)


def relative_perimeter(chi, mesh: Mesh) -> float:
    """Length of the drop boundary inside the container.

    Interior edges separating filled from empty cells count; edges on the
    physical boundary never count; artificial-truncation edges of filled
    cells count (the cut is not part of the container boundary).
    """
    chi = check_density(chi, mesh, binary=True) > 0.5
    ec = mesh.edge_cells
    L = mesh.edge_lengths
    interior = ec[:, 1] >= 0
    a = chi[ec[:, 0]]
    b = np.where(interior, chi[np.maximum(ec[:, 1], 0)], False)
    total = L[interior & (a != b)].sum()
    art = (~interior) & (mesh.edge_boundary_tag == EdgeTag.ARTIFICIAL) & a
    return float(total + L[art].sum())


def cells_near_truncation(mesh: Mesh, distance: float) -> np.ndarray:
    """Boolean mask of cells whose centroid lies within ``distance`` of an artificial edge."""
    art = mesh.boundary_edges[mesh.edge_tags == EdgeTag.ARTIFICIAL]
    if art.size == 0:
        return np.zeros(mesh.n_cells, dtype=bool)
    a, b = mesh.vertices[art[:, 0]], mesh.vertices[art[:, 1]]
    k = 8
    t = np.linspace(0.0, 1.0, k + 1)
    samples = (a[:, None, :] * (1 - t)[None, :, None] + b[:, None, :] * t[None, :, None]).reshape(-1, 2)
    dist, _ = cKDTree(samples).query(mesh.centroids)
    return dist <= distance


def truncation_mass(chi, mesh: Mesh, factor: float = 2.0) -> float:
    chi = check_density(chi, mesh)
    near = cells_near_truncation(mesh, factor * mesh.h)
    return float(chi[near] @ mesh.areas[near])


def check_truncation(chi, mesh: Mesh, threshold: float = 1e-3) -> bool:
    """Warn (and return False) when drop mass sits within 2h of the artificial cut."""
    mass = truncation_mass(chi, mesh)
    if mass >= threshold:
        msg = f"drop mass {mass:.3g} within 2h of the truncation; enlarge the truncation"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return False
    return True


def vertex_average(values, mesh: Mesh) -> np.ndarray:
    """Area-weighted average of a cell field over the cells around each vertex."""
    values = np.asarray(values, dtype=float)
    num = np.zeros(mesh.n_vertices)
    den = np.zeros(mesh.n_vertices)
    w = values * mesh.areas
    for k in range(3):
        np.add.at(num, mesh.triangles[:, k], w)
        np.add.at(den, mesh.triangles[:, k], mesh.areas)
    return num / den


def contour_segments(v, mesh: Mesh, t: float, cells=None) -> np.ndarray:
    """Segments of the level line ``{v = t}`` of a P1 field, shape ``(m, 2, 2)``.

    Vertices with ``v >= t`` count as above, so every triangle is crossed by
    zero or one segment.
    """
    v = np.asarray(v, dtype=float)
    tri = mesh.triangles if cells is None else mesh.triangles[cells]
    P = mesh.vertices
    above = v >= t
    pts, cross = [], []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = tri[:, i], tri[:, j]
        m = above[a] != above[b]
        den = np.where(m, v[b] - v[a], 1.0)
        s = np.clip((t - v[a]) / den, 0.0, 1.0)
        pts.append(P[a] + s[:, None] * (P[b] - P[a]))
        cross.append(m)
    cross = np.stack(cross, axis=1)
    pts = np.stack(pts, axis=1)
    hit = cross.sum(axis=1) == 2
    return pts[hit][cross[hit]].reshape(-1, 2, 2)


def contour_length(v, mesh: Mesh, t: float, cells=None) -> float:
    seg = contour_segments(v, mesh, t, cells)
    return float(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1).sum())


def smoothed_perimeter(chi, mesh: Mesh) -> float:
    """Relative perimeter from the half level line of the vertex-averaged density.

    Unlike :func:`relative_perimeter` this does not follow the cell staircase,
    so it converges to the length of the underlying curve.  Artificial edges
    whose end vertices both average at least one half are added.
    """
    chi = check_density(chi, mesh, binary=True)
    v = vertex_average(chi, mesh)
    total = contour_length(v, mesh, 0.5)
    art = mesh.boundary_edges[mesh.edge_tags == EdgeTag.ARTIFICIAL]
    if art.size:
        on = (v[art[:, 0]] >= 0.5) & (v[art[:, 1]] >= 0.5)
        total += float(np.linalg.norm(mesh.vertices[art[on, 1]] - mesh.vertices[art[on, 0]], axis=1).sum())
    return total
