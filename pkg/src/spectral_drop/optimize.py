"""Thresholding optimizer for the first eigenvalue of a drop.

Each outer step solves the penalized eigenproblem on the current density and
then re-selects the drop from the cell averages of ``u1**2``: the cells with
the largest values up to the target volume (constrained mode), or every cell
with ``M * mean(u1**2) >= Lambda`` (penalized mode).  For fixed ``M`` both
rules minimize the relaxed Rayleigh quotient over the density with ``u1``
frozen, so the eigenvalue never increases within one ``M`` level apart from
ties.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from .errors import ValidationError
from .analytic import strip_reference
from .geometry import (Box, Disc, DomainSpec, EdgeTag, Mesh, build_mesh, check_density,
                       check_truncation, relative_perimeter, smoothed_perimeter, volume)
from .pde import AssembledSystem, SpectralResult, assemble, cell_average_sq, solve_eigs

logger = logging.getLogger(__name__)

INIT_CHOICES = ("ball-at-boundary", "random", "user")
# relaxed-stage penalties, in units of 1 / (characteristic length)^2
RELAXED_LEVELS = (10.0, 30.0, 100.0, 300.0, 1000.0)
# relaxed stages stop once the penalty layer 1/sqrt(M) is about 2h thick
RELAXED_CAP = 0.25
FINAL_LEVELS = (1e2, 1e4, 1e6)
# penalized mode skips the coarsest relaxed levels (their layer is as wide as the drop)
PENALIZED_MIN_LEVEL = 30.0
POLISH_RANGE = (0.8, 1.4)
POLISH_STEP = 0.05
POLISH_LAYER_STEPS = 8


@dataclass
class OptimizerConfig:
    """Settings for :func:`minimize_lambda1` and :func:`penalized_minimize`.

    ``m_schedule`` lists absolute penalty values; when omitted a relaxed
    continuation is built from the drop size and followed by
    ``FINAL_LEVELS / h**2``.  The eigenvalue is reported at the last level.
    """

    target_volume: Optional[float] = None
    penalty: Optional[float] = None
    m_schedule: Optional[Sequence[float]] = None
    max_outer_iters: int = 40
    stop_tol_lambda: float = 1e-6
    stop_tol_volume: float = 0.0
    seed: int = 0
    init: str = "ball-at-boundary"
    init_chi: Optional[np.ndarray] = None
    eig_tol: float = 1e-8
    robin_k: float = 0.0
    volume_polish: bool = True
    relaxed_levels: Sequence[float] = RELAXED_LEVELS
    keep_iterates: bool = False

    def __post_init__(self):
        if (self.target_volume is None) == (self.penalty is None):
            raise ValidationError("exactly one of target_volume / penalty must be set")
        if self.target_volume is not None and not self.target_volume > 0:
            raise ValidationError("target_volume must be positive")
        if self.penalty is not None and not self.penalty > 0:
            raise ValidationError("penalty Lambda must be positive")
        if self.m_schedule is not None:
            sched = [float(m) for m in self.m_schedule]
            if not sched or any(m <= 0 for m in sched) or any(b < a for a, b in zip(sched, sched[1:])):
                raise ValidationError("M schedule must be a nonempty ascending list of positive values")
            self.m_schedule = tuple(sched)
        self.relaxed_levels = tuple(float(m) for m in self.relaxed_levels)
        if any(m <= 0 for m in self.relaxed_levels):
            raise ValidationError("relaxed levels must be positive")
        if self.max_outer_iters < 1:
            raise ValidationError("max_outer_iters must be at least 1")
        if self.init not in INIT_CHOICES:
            raise ValidationError(f"init must be one of {INIT_CHOICES}")
        if self.init == "user" and self.init_chi is None:
            raise ValidationError("init='user' needs init_chi")
        if self.stop_tol_lambda < 0 or self.stop_tol_volume < 0:
            raise ValidationError("stopping tolerances must be nonnegative")

    @property
    def constrained(self) -> bool:
        return self.target_volume is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("init_chi")
        if d["m_schedule"] is not None:
            d["m_schedule"] = list(d["m_schedule"])
        d["relaxed_levels"] = list(d["relaxed_levels"])
        return d


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    lambda1: float
    volume: float
    perimeter: float
    sym_diff: float
    M: float


@dataclass
class OptimizerTrace:
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)  # densities, only with keep_iterates

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "lambda1", "volume", "perimeter", "sym_diff", "M"])
        for r in self.records:
            w.writerow([r.iter] + [format(v, ".17g") for v in (r.lambda1, r.volume, r.perimeter, r.sym_diff, r.M)])
        return buf.getvalue()


@dataclass
class OptimizeResult:
    chi: np.ndarray
    lam: float
    objective: float
    trace: OptimizerTrace
    mesh: Mesh
    system: AssembledSystem
    spectral: SpectralResult
    truncation_ok: bool = True


# ----------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------


def _select_top(scores: np.ndarray, areas: np.ndarray, c: float) -> np.ndarray:
    order = np.lexsort((np.arange(scores.size), -scores))  # descending, ties by index
    cum = np.cumsum(areas[order])
    k = int(np.searchsorted(cum, c * (1 + 1e-12), side="right"))
    chi = np.zeros(scores.size)
    chi[order[:k]] = 1.0
    return chi


def threshold_projection(u, mesh: Mesh, c: float) -> np.ndarray:
    """Binary density made of the cells with the largest mean ``u**2``.

    Whole cells are taken in decreasing order (ties by ascending index)
    while the accumulated area stays at or below ``c``.
    """
    if not c > 0:
        raise ValidationError("target volume must be positive")
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValidationError("u must be a vertex field of the mesh")
    if c > mesh.area * (1 + 1e-12):
        raise ValidationError(f"target volume {c} exceeds region area {mesh.area}")
    return _select_top(cell_average_sq(u, mesh), mesh.areas, c)


def penalized_projection(u, mesh: Mesh, M: float, Lambda: float) -> np.ndarray:
    """Cells with ``M * mean(u**2) >= Lambda`` (at least the best cell)."""
    avg = cell_average_sq(u, mesh)
    chi = (M * avg >= Lambda).astype(float)
    if not chi.any():
        chi[int(np.argmax(avg))] = 1.0
    return chi


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def nearest_neumann_point(mesh: Mesh, target) -> np.ndarray:
    edges = mesh.boundary_edges[mesh.edge_tags == EdgeTag.NEUMANN]
    target = np.asarray(target, dtype=float)
    if edges.size == 0:
        return target
    a, b = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    d = b - a
    t = np.clip(np.einsum("ij,ij->i", target - a, d) / np.einsum("ij,ij->i", d, d), 0.0, 1.0)
    p = a + t[:, None] * d
    k = int(np.argmin(np.linalg.norm(p - target, axis=1)))
    return p[k]


def ball_at_boundary(mesh: Mesh, c: float, center=None) -> np.ndarray:
    """Cells nearest to a boundary point (a discrete half-disc of volume ``c``)."""
    if center is None:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        center = nearest_neumann_point(mesh, 0.5 * (lo + hi))
    score = -np.sum((mesh.centroids - np.asarray(center)) ** 2, axis=1)
    return _select_top(score, mesh.areas, c)


def _char_length(cfg: OptimizerConfig) -> float:
    if cfg.constrained:
        return math.sqrt(cfg.target_volume)
    return cfg.penalty ** -0.25


def default_schedule(cfg: OptimizerConfig, h: float) -> tuple:
    ell = _char_length(cfg)
    lowest = 0.0 if cfg.constrained else PENALIZED_MIN_LEVEL
    relaxed = [m / ell**2 for m in cfg.relaxed_levels
               if lowest <= m and m / ell**2 <= RELAXED_CAP / h**2]
    if not relaxed:
        # drop is small on this mesh: keep one stage where cells can still move
        relaxed = [RELAXED_CAP / h**2]
    final = [m / h**2 for m in FINAL_LEVELS]
    return tuple(sorted(relaxed + final))


def _initial_chi(mesh: Mesh, cfg: OptimizerConfig) -> np.ndarray:
    if cfg.init == "user":
        chi = check_density(cfg.init_chi, mesh)
        if cfg.constrained:
            # bring the user density to the target volume, keeping its largest values
            chi = _select_top(chi, mesh.areas, cfg.target_volume)
        return chi
    c0 = cfg.target_volume
    if c0 is None:
        j2 = 5.783185962946784
        c0 = min(0.5 * math.pi * math.sqrt(2 * j2 / (math.pi * cfg.penalty)), 0.5 * mesh.area)
    if cfg.init == "random":
        rng = np.random.default_rng(cfg.seed)
        return _select_top(rng.random(mesh.n_cells), mesh.areas, c0)
    return ball_at_boundary(mesh, c0)


def _sym_diff(a, b, areas) -> float:
    return float(np.abs(a - b) @ areas)


def _run(spec: DomainSpec, cfg: OptimizerConfig, h: Optional[float], truncation, mesh: Optional[Mesh],
         mesh_kw: dict) -> OptimizeResult:
    if mesh is None:
        if h is None:
            raise ValidationError("either h or a mesh is required")
        mesh = build_mesh(spec, h, truncation, **mesh_kw)
    h = mesh.h
    system = assemble(mesh, cfg.robin_k)
    if cfg.constrained and cfg.target_volume >= mesh.area:
        raise ValidationError(f"target volume {cfg.target_volume} not below region area {mesh.area:.6g}")
    schedule = cfg.m_schedule or default_schedule(cfg, h)
    chi = _initial_chi(mesh, cfg)
    areas = mesh.areas
    trace = OptimizerTrace()
    it = 0
    best = None
    for stage, M in enumerate(schedule):
        best = None
        prev_lam = math.inf
        history = [chi]
        for _ in range(cfg.max_outer_iters):
            res = solve_eigs(system, chi, M, K=1, tol=cfg.eig_tol, seed=cfg.seed)
            lam = res.lambda1
            vol = float(chi @ areas)
            obj = lam if cfg.constrained else lam + cfg.penalty * vol
            sd = _sym_diff(chi, history[-2], areas) if len(history) > 1 else 0.0
            trace.append(TraceRecord(it, lam, vol, relative_perimeter(chi, mesh), sd, M))
            if cfg.keep_iterates:
                trace.iterates.append(chi)
            it += 1
            if best is None or obj < best[0]:
                best = (obj, lam, chi, res)
            elif obj > best[0] * (1 + 1e-10):
                logger.info("non-monotone step at M=%.3g: %.10g > %.10g", M, obj, best[0])
            if cfg.constrained:
                new = threshold_projection(res.u1, mesh, cfg.target_volume)
            else:
                new = penalized_projection(res.u1, mesh, M, cfg.penalty)
            change = _sym_diff(new, chi, areas)
            small_step = abs(prev_lam - lam) <= cfg.stop_tol_lambda * lam
            cycled = any(np.array_equal(new, old) for old in history[-3:])
            if change == 0.0 or cycled or (small_step and change <= cfg.stop_tol_volume):
                break
            prev_lam = lam
            chi = new
            history.append(chi)
        chi = best[2]
        logger.debug("stage %d M=%.4g: lambda1=%.8g after %d records", stage, M, best[1], len(trace))
    if not cfg.constrained and cfg.volume_polish:
        best = _polish_volume(system, best, cfg, schedule, trace, it)
    obj, lam, chi, res = best
    ok = check_truncation(chi, mesh)
    return OptimizeResult(chi, lam, obj, trace, mesh, system, res, ok)


def _polish_volume(system, best, cfg, schedule, trace, it):
    """Choose the penalized drop volume along the superlevel family of ``u1``.

    At the penalties where cells can still move, the cell rule settles on a
    set shrunk by about the penalty layer ``1 / sqrt(M)``.  Here the shape is
    kept (superlevel sets of the eigenfunction computed at the last mobile
    penalty) and only the volume is chosen by minimizing the objective at the
    final penalty over a grid, refined by a parabola through the best three.
    """
    mesh = system.mesh
    areas = mesh.areas
    M_final = schedule[-1]
    mobile = [m for m in schedule if m * mesh.h**2 <= RELAXED_CAP]
    M_rank = mobile[-1] if mobile else schedule[0]
    chi0 = best[2]
    scores = cell_average_sq(solve_eigs(system, chi0, M_rank, tol=cfg.eig_tol, seed=cfg.seed).u1, mesh)
    c0 = float(chi0 @ areas)
    cap = 0.95 * mesh.area

    def evaluate(c):
        chi = _select_top(scores, areas, min(c, cap))
        res = solve_eigs(system, chi, M_final, tol=cfg.eig_tol, seed=cfg.seed)
        vol = float(chi @ areas)
        nonlocal it
        trace.append(TraceRecord(it, res.lambda1, vol, relative_perimeter(chi, mesh),
                                 _sym_diff(chi, chi0, areas), M_final))
        if cfg.keep_iterates:
            trace.iterates.append(chi)
        it += 1
        return (res.lambda1 + cfg.penalty * vol, res.lambda1, chi, res)

    factors = np.arange(POLISH_RANGE[0], POLISH_RANGE[1] + 1e-9, POLISH_STEP)
    cands = [evaluate(c0 * f) for f in factors]
    vols = np.array([float(cand[2] @ areas) for cand in cands])
    objs = np.array([cand[0] for cand in cands])
    k = int(np.argmin(objs))
    if 0 < k < len(cands) - 1 and len(np.unique(vols[k - 1:k + 2])) == 3:
        x, y = vols[k - 1:k + 2], objs[k - 1:k + 2]
        a2, a1, _ = np.polyfit(x, y, 2)
        if a2 > 0:
            cands.append(evaluate(-a1 / (2 * a2)))
    cands.append(best)
    top = min(cands, key=lambda cand: cand[0])

    # the objective is jagged in the volume (partial rows of cells); finish
    # with whole-layer moves, which keep the staircase clean
    def evaluate_chi(chi):
        res = solve_eigs(system, chi, M_final, tol=cfg.eig_tol, seed=cfg.seed)
        vol = float(chi @ areas)
        nonlocal it
        trace.append(TraceRecord(it, res.lambda1, vol, relative_perimeter(chi, mesh),
                                 _sym_diff(chi, chi0, areas), M_final))
        if cfg.keep_iterates:
            trace.iterates.append(chi)
        it += 1
        return (res.lambda1 + cfg.penalty * vol, res.lambda1, chi, res)

    for _ in range(POLISH_LAYER_STEPS):
        moves = [chi for chi in layer_moves(top[2], mesh) if 0 < chi @ areas <= cap]
        if not moves:
            break
        step = min((evaluate_chi(chi) for chi in moves), key=lambda cand: cand[0])
        if step[0] >= top[0]:
            break
        top = step
    return top


def _peel(inside, tri, n_vertices):
    touch_out = np.zeros(n_vertices, bool)
    touch_out[tri[~inside].ravel()] = True
    return inside & ~touch_out[tri].any(axis=1)


def _grow(inside, tri, n_vertices):
    touch_in = np.zeros(n_vertices, bool)
    touch_in[tri[inside].ravel()] = True
    return inside | touch_in[tri].any(axis=1)


def layer_moves(chi, mesh: Mesh) -> list:
    """Whole-layer edits of a drop: peel the cells sharing a vertex with the
    outside, grow by the outside cells sharing a vertex with the drop, and
    the two compositions (opening and closing), which clear ragged rows."""
    inside = chi > 0.5
    tri, nv = mesh.triangles, mesh.n_vertices
    peel, grow = _peel(inside, tri, nv), _grow(inside, tri, nv)
    out = []
    for c in (peel, grow, _grow(peel, tri, nv), _peel(grow, tri, nv)):
        if c.any() and not np.array_equal(c, inside) and not any(np.array_equal(c, o) for o in out):
            out.append(c)
    return [c.astype(float) for c in out]


def minimize_lambda1(spec: DomainSpec, cfg: OptimizerConfig, h: Optional[float] = None, truncation=None,
                     mesh: Optional[Mesh] = None, **mesh_kw) -> OptimizeResult:
    """Minimize the first eigenvalue over drops of volume ``cfg.target_volume``."""
    if not cfg.constrained:
        raise ValidationError("minimize_lambda1 needs target_volume (constrained mode)")
    return _run(spec, cfg, h, truncation, mesh, mesh_kw)


def penalized_minimize(spec: DomainSpec, cfg: OptimizerConfig, h: Optional[float] = None, truncation=None,
                       mesh: Optional[Mesh] = None, **mesh_kw) -> OptimizeResult:
    """Minimize ``lambda1 + Lambda * |drop|``."""
    if cfg.constrained:
        raise ValidationError("penalized_minimize needs penalty (penalized mode)")
    return _run(spec, cfg, h, truncation, mesh, mesh_kw)


# ----------------------------------------------------------------------
# drift experiment
# ----------------------------------------------------------------------


def _boundary_curve(spec: DomainSpec):
    """Arclength parametrization of the obstacle boundary: s -> (point, tangent)."""
    if spec.parabola is not None:
        a, b, c0 = spec.parabola
        xv = -b / (2 * a)

        def x_of_s(s):
            # invert arclength from the vertex by Newton iteration
            def arclen(x):
                u = 2 * a * (x - xv)
                return (u * math.sqrt(1 + u * u) + math.asinh(u)) / (4 * a)
            x = xv + s
            for _ in range(60):
                u = 2 * a * (x - xv)
                step = (arclen(x) - s) / math.sqrt(1 + u * u)
                x -= step
                if abs(step) < 1e-15 * max(1.0, abs(x)):
                    break
            return x

        def at(s):
            x = x_of_s(s)
            y = a * x * x + b * x + c0
            t = np.array([1.0, 2 * a * x + b])
            return np.array([x, y]), t / np.linalg.norm(t)
        return at
    pts = np.asarray(spec.obstacle, dtype=float)
    ring = np.vstack([pts, pts[:1]])
    seg = np.diff(ring, axis=0)
    L = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(L)])

    def at(s):
        s = s % cum[-1]
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(L) - 1)
        t = seg[k] / L[k]
        # counterclockwise obstacle: the container is on the right of the tangent
        return ring[k] + (s - cum[k]) * t, -t
    return at


@dataclass(frozen=True)
class DriftRow:
    position: float
    x: float
    y: float
    distance: float
    lambda1: float
    volume: float
    truncation_ok: bool


def _drift_one(args):
    spec, s, R, c, h, cfg_kw = args
    at = _boundary_curve(spec)
    p, t = at(s)
    angle = math.atan2(t[1], t[0])
    trunc = Disc(float(p[0]), float(p[1]), R)
    cfg = OptimizerConfig(target_volume=c, **cfg_kw)
    mesh = build_mesh(spec, h, trunc, lattice_origin=tuple(p), lattice_angle=angle)
    res = minimize_lambda1(spec, cfg, mesh=mesh)
    return DriftRow(float(s), float(p[0]), float(p[1]), float(np.hypot(*p)), res.lam,
                    float(res.chi @ mesh.areas), res.truncation_ok)


def drift_experiment(spec: DomainSpec, R: float, positions, c: float, h: float,
                     workers: int = 1, **cfg_kw) -> list:
    """Local optimal eigenvalue near boundary points at increasing distance.

    ``positions`` are signed arclengths along the obstacle boundary (measured
    from the parabola vertex, or from the first obstacle vertex).  Each
    position is solved on the disc of radius ``R`` around the boundary point
    intersected with the container, meshed in a frame aligned with the local
    tangent so that all local meshes look alike.  Rows are sorted by distance
    of the boundary point from the origin.
    """
    if spec.kind not in ("exterior_convex", "half_plane"):
        raise ValidationError("drift experiment needs an exterior_convex (or half_plane control) container")
    if not (R > 0 and c > 0 and h > 0):
        raise ValidationError("R, c and h must be positive")
    if spec.kind == "half_plane":
        spec_local = spec

        def at(s):
            return np.array([float(s), 0.0]), np.array([1.0, 0.0])
    else:
        spec_local = spec
        at = _boundary_curve(spec)
    if spec.truncation is not None:
        x0, y0, x1, y1 = spec.truncation.bounds
        for s in positions:
            p, _ = at(s)
            if p[0] - R < x0 or p[0] + R > x1 or p[1] - R < y0 or p[1] + R > y1:
                raise ValidationError(f"ball of radius {R} at position {s} leaves the truncation box")
    if spec.kind == "half_plane":
        rows = []
        for s in positions:
            p, _ = at(s)
            trunc = Disc(float(p[0]), 0.0, R)
            mesh = build_mesh(spec_local, h, trunc, lattice_origin=tuple(p), lattice_angle=0.0)
            res = minimize_lambda1(spec_local, OptimizerConfig(target_volume=c, **cfg_kw), mesh=mesh)
            rows.append(DriftRow(float(s), float(p[0]), 0.0, abs(float(p[0])), res.lam,
                                 float(res.chi @ mesh.areas), res.truncation_ok))
    else:
        jobs = [(spec_local, float(s), float(R), float(c), float(h), cfg_kw) for s in positions]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_drift_one, jobs))
        else:
            rows = [_drift_one(j) for j in jobs]
    rows.sort(key=lambda r: (r.distance, r.position))
    return rows


def drift_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position", "x", "y", "distance", "lambda1", "volume", "truncation_ok"])
    for r in rows:
        w.writerow([format(v, ".17g") for v in (r.position, r.x, r.y, r.distance, r.lambda1, r.volume)]
                   + [int(r.truncation_ok)])
    return buf.getvalue()


# ----------------------------------------------------------------------
# optimality conditions
# ----------------------------------------------------------------------


def cell_gradients(u, mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]
    uu = np.asarray(u)[mesh.triangles]
    A2 = 2.0 * mesh.signed_areas
    b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
    return np.column_stack([(b * uu).sum(1) / A2, (c * uu).sum(1) / A2])


def recovered_gradient(u, mesh: Mesh, mask=None) -> np.ndarray:
    """Area-weighted vertex average of cell gradients over ``mask`` cells."""
    g = cell_gradients(u, mesh)
    w = mesh.areas if mask is None else mesh.areas * mask
    num = np.zeros((mesh.n_vertices, 2))
    den = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(num, mesh.triangles[:, k], g * w[:, None])
        np.add.at(den, mesh.triangles[:, k], w)
    out = np.full((mesh.n_vertices, 2), np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok, None]
    return out


def free_boundary_edges(chi, mesh: Mesh) -> np.ndarray:
    """Indices (into ``mesh.edges``) of interior edges separating drop and void."""
    ec = mesh.edge_cells
    interior = ec[:, 1] >= 0
    inside = chi > 0.5
    return np.flatnonzero(interior & (inside[ec[:, 0]] != inside[np.maximum(ec[:, 1], 0)]))


@dataclass
class OptimalityReport:
    grad_cv: float
    grad_mean: float
    contact_angles: list
    touches_boundary: bool
    perimeter: float
    perimeter_smooth: float
    perimeter_bound: Optional[float] = None
    perimeter_slack: Optional[float] = None
    samples: int = 0

    def as_rows(self):
        rows = [("grad_cv", self.grad_cv), ("grad_mean", self.grad_mean),
                ("touches_boundary", float(self.touches_boundary)), ("perimeter", self.perimeter),
                ("perimeter_smooth", self.perimeter_smooth)]
        rows += [(f"contact_angle_{i}", a) for i, a in enumerate(self.contact_angles)]
        if self.perimeter_bound is not None:
            rows += [("perimeter_bound", self.perimeter_bound), ("perimeter_slack", self.perimeter_slack)]
        return rows


def _contact_angles(chi, mesh: Mesh, fb: np.ndarray, window: float) -> list:
    edges = mesh.edges
    fb_vertices = set(edges[fb].ravel().tolist())
    neu = mesh.boundary_edges[mesh.edge_tags == EdgeTag.NEUMANN]
    neu_vertices = set(neu.ravel().tolist())
    contacts = sorted(fb_vertices & neu_vertices)
    if not contacts:
        return []
    mids = mesh.vertices[edges[fb]].mean(axis=1)
    neu_mid = mesh.vertices[neu].mean(axis=1)
    neu_dir = mesh.vertices[neu[:, 1]] - mesh.vertices[neu[:, 0]]
    angles = []
    used = np.zeros(len(contacts), dtype=bool)
    cpts = mesh.vertices[contacts]
    for i, q in enumerate(cpts):
        if used[i]:
            continue
        # merge contact vertices of the same contact region
        close = np.linalg.norm(cpts - q, axis=1) < 3 * mesh.h
        used |= close
        q = cpts[close].mean(axis=0)
        near = np.linalg.norm(neu_mid - q, axis=1) < max(window, 2 * mesh.h)
        d = neu_dir[near]
        # orient consistently before averaging the wall direction
        d = d * np.sign(d @ d[0])[:, None]
        t = d.sum(axis=0)
        t /= np.linalg.norm(t)
        n = np.array([-t[1], t[0]])
        cells = mesh.centroids[chi > 0.5]
        if np.mean((cells - q) @ n) < 0:
            n = -n
        rel = mids - q
        s, eta = rel @ t, rel @ n
        sel = (np.hypot(s, eta) < window) & (eta > -0.5 * mesh.h)
        if sel.sum() < 4:
            continue
        V = np.column_stack([np.ones(sel.sum()), eta[sel], eta[sel] ** 2])
        coef, *_ = np.linalg.lstsq(V, s[sel], rcond=None)
        angles.append(math.degrees(math.atan2(1.0, abs(coef[1]))))
    return angles


def optimality_report(chi, spectral: SpectralResult, mesh: Mesh, Lambda: Optional[float] = None,
                      offset: float = 4.0, window: Optional[float] = None) -> OptimalityReport:
    """Discrete checks of the first-order optimality conditions of a drop.

    The gradient of ``u1`` is sampled ``offset * h`` inside the drop from each
    free-boundary edge midpoint (following the recovered gradient), which keeps
    the samples clear of the cell-wise staircase.  Contact angles come from a
    quadratic fit of the free-boundary midpoints within ``window`` of each
    contact point, in the frame of the adjacent wall.  The perimeter bound
    ``P <= Lambda**-0.5 * lambda1 * |drop|**0.5`` is checked with the smoothed
    perimeter; the cell-edge perimeter is reported alongside.
    """
    chi = check_density(chi, mesh, binary=True)
    u = spectral.u1
    vol = volume(chi, mesh)
    if window is None:
        window = 0.4 * math.sqrt(vol)
    fb = free_boundary_edges(chi, mesh)
    grad = recovered_gradient(u, mesh, chi)
    inside_v = np.isfinite(grad[:, 0])
    interp = LinearNDInterpolator(mesh.vertices[inside_v], grad[inside_v])
    mids = mesh.vertices[mesh.edges[fb]].mean(axis=1)
    ec = mesh.edge_cells[fb]
    in_cell = np.where(chi[ec[:, 0]] > 0.5, ec[:, 0], ec[:, 1])
    g0 = cell_gradients(u, mesh)[in_cell]
    direction = g0 / np.maximum(np.linalg.norm(g0, axis=1, keepdims=True), 1e-300)
    pts = mids + offset * mesh.h * direction
    g = interp(pts)
    mag = np.linalg.norm(g, axis=1)
    mag = mag[np.isfinite(mag)]
    cv = float(mag.std() / mag.mean()) if mag.size > 1 else math.nan
    angles = _contact_angles(chi, mesh, fb, window)
    tags = mesh.edge_boundary_tag
    bnd = (mesh.edge_cells[:, 1] < 0) & (tags == EdgeTag.NEUMANN)
    touches = bool(np.any(chi[mesh.edge_cells[bnd, 0]] > 0.5))
    per = relative_perimeter(chi, mesh)
    per_s = smoothed_perimeter(chi, mesh)
    rep = OptimalityReport(cv, float(mag.mean()) if mag.size else math.nan, angles, touches, per, per_s,
                           samples=int(mag.size))
    if Lambda is not None:
        if not Lambda > 0:
            raise ValidationError("Lambda must be positive")
        bound = Lambda ** -0.5 * spectral.lambda1 * math.sqrt(vol)
        rep.perimeter_bound = bound
        rep.perimeter_slack = bound - per_s
    return rep


# ----------------------------------------------------------------------
# strip sweep
# ----------------------------------------------------------------------

SWEEP_LEVELS = (100.0, 300.0, 1000.0)


@dataclass(frozen=True)
class SweepRow:
    c: float
    lambda_numeric: float
    lambda_from_disc: float
    lambda_from_band: float
    lambda_rect: float
    lambda_hd: float
    branch: str
    numeric_shape: str
    regime: str


def _sweep_one(args):
    c, h, width, margin, cfg_kw = args
    spec = DomainSpec.strip(width)
    trunc_len = c / width + 2 * margin
    mesh = build_mesh(spec, h, Box(0.0, 0.0, trunc_len, width))
    kw = dict(cfg_kw)
    kw.setdefault("relaxed_levels", SWEEP_LEVELS)
    from_disc = minimize_lambda1(spec, OptimizerConfig(target_volume=c, **kw), mesh=mesh)
    x = mesh.centroids[:, 0]
    band = (np.abs(x - 0.5 * trunc_len) < 0.5 * c / width).astype(float)
    from_band = minimize_lambda1(spec, OptimizerConfig(target_volume=c, init="user", init_chi=band, **kw),
                                 mesh=mesh)
    best = min((from_disc, from_band), key=lambda r: r.lam)
    ys = mesh.centroids[best.chi > 0.5, 1]
    spans = ys.min() < mesh.h and ys.max() > width - mesh.h
    ref = strip_reference(c, width)
    return SweepRow(float(c), best.lam, from_disc.lam, from_band.lam, ref.rectangle.lam, ref.half_disc.lam,
                    ref.branch, "rectangle" if spans else "half_disc", ref.regime)


def strip_sweep(cs, h: float, width: float = 1.0, margin: float = 1.5, workers: int = 1, **cfg_kw) -> list:
    """Numerical optimum in a strip for each volume in ``cs``.

    Two local searches are run per volume, one from a half-disc on a wall
    and one from a full-width band; the lower eigenvalue is reported.
    """
    cs = [float(c) for c in cs]
    if any(c <= 0 for c in cs) or not (h > 0 and width > 0 and margin > 0):
        raise ValidationError("sweep needs positive volumes, h, width and margin")
    jobs = [(c, h, width, margin, cfg_kw) for c in cs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


def sweep_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["c", "lambda_numeric", "lambda_from_disc", "lambda_from_band", "lambda_rect", "lambda_hd",
                "branch", "numeric_shape", "regime"])
    for r in rows:
        w.writerow([format(v, ".17g") for v in (r.c, r.lambda_numeric, r.lambda_from_disc, r.lambda_from_band,
                                                  r.lambda_rect, r.lambda_hd)]
                   + [r.branch, r.numeric_shape, r.regime])
    return buf.getvalue()
