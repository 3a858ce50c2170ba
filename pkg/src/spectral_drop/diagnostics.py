"""Discrete checks of inequality chains, rearrangements and gamma-convergence."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .geometry import DomainSpec, Mesh, check_density, contour_length, relative_perimeter, volume
from .pde import AssembledSystem, assemble, energy_function, solve_eigs, solve_poisson

logger = logging.getLogger(__name__)

EPS_W = 1e-6


@dataclass(frozen=True)
class CheckRow:
    name: str
    lhs: float
    rhs: float
    slack: float
    passed: bool


def checks_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "lhs", "rhs", "slack", "pass"])
    for r in rows:
        w.writerow([r.name, format(r.lhs, ".17g"), format(r.rhs, ".17g"), format(r.slack, ".17g"), int(r.passed)])
    return buf.getvalue()


def checks_summary(rows) -> str:
    lines = []
    for r in rows:
        lines.append(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: lhs={r.lhs:.6g} rhs={r.rhs:.6g} slack={r.slack:.3g}")
    return "\n".join(lines) + "\n"


def _le(name, lhs, rhs) -> CheckRow:
    return CheckRow(name, float(lhs), float(rhs), float(rhs - lhs), bool(lhs <= rhs))


# ----------------------------------------------------------------------
# gamma distance and weak limits
# ----------------------------------------------------------------------


def gamma_distance(chiA, chiB, system: AssembledSystem, M: float) -> float:
    """L2 distance between the energy functions of two drops."""
    wA, _ = energy_function(system, chiA, M)
    wB, _ = energy_function(system, chiB, M)
    return system.l2_norm(wA - wB)


def support_from_w(w, mesh: Mesh, eps_rel: float = EPS_W) -> np.ndarray:
    """Cells whose mean of ``w`` exceeds ``eps_rel * max|w|``."""
    w = np.asarray(w, dtype=float)
    eps = eps_rel * float(np.abs(w).max())
    return (w[mesh.triangles].mean(axis=1) > eps).astype(float)


@dataclass
class TermRecord:
    n: int
    gamma_distance: float
    eigenvalues: np.ndarray
    volume: float
    E1: float


@dataclass
class SequenceDiagnostic:
    terms: list
    w_limit: np.ndarray
    chi_limit: np.ndarray
    limit_volume: float
    limit_eigenvalues: np.ndarray
    tail: int
    tol_volume: float
    tol_lambda: float
    volume_semicontinuous: bool
    lambda_semicontinuous: list
    lambda_continuous: list
    volume_margin: float
    lambda_margins: list = field(default_factory=list)

    def rows(self):
        out = [CheckRow("volume_liminf", self.limit_volume, self.limit_volume + self.volume_margin,
                        self.volume_margin, self.volume_semicontinuous)]
        for k, (ok, m) in enumerate(zip(self.lambda_semicontinuous, self.lambda_margins)):
            lam = float(self.limit_eigenvalues[k])
            out.append(CheckRow(f"lambda{k + 1}_liminf", lam, lam + m, m, ok))
        for k, ok in enumerate(self.lambda_continuous):
            out.append(CheckRow(f"lambda{k + 1}_continuity", 0.0, 0.0, 0.0, ok))
        return out

    def terms_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        K = len(self.limit_eigenvalues)
        w.writerow(["n", "gamma_distance", "volume", "E1"] + [f"lambda{k + 1}" for k in range(K)])
        for t in self.terms:
            w.writerow([t.n] + [format(v, ".17g") for v in (t.gamma_distance, t.volume, t.E1, *t.eigenvalues)])
        return buf.getvalue()


def weak_gamma_limit(sequence: Sequence, system: AssembledSystem, M: float, K: int = 1,
                     tail: Optional[int] = None, tol_volume: Optional[float] = None,
                     tol_lambda: float = 1e-6, eps_rel: float = EPS_W, seed: int = 0) -> SequenceDiagnostic:
    """Semicontinuity and continuity verdicts along a sequence of drops.

    The last term stands in for the limit; the limit drop is the support of
    its energy function.  ``tail`` (default: the last third, rounded up)
    sets which terms enter the liminf.  Volume tolerance defaults to the
    largest cell area, eigenvalue tolerance is relative.
    """
    seq = [check_density(c, system.mesh) for c in sequence]
    if len(seq) < 3:
        raise ValidationError("a sequence needs at least three terms")
    mesh = system.mesh
    N = len(seq)
    tail = tail or max(1, math.ceil(N / 3))
    if not 1 <= tail <= N:
        raise ValidationError("tail must be between 1 and the sequence length")
    tol_volume = float(mesh.areas.max()) if tol_volume is None else tol_volume
    ws, Es, lams, vols = [], [], [], []
    for chi in seq:
        w, E1 = energy_function(system, chi, M)
        ws.append(w)
        Es.append(E1)
        lams.append(solve_eigs(system, chi, M, K=K, seed=seed).eigenvalues)
        vols.append(volume(chi, mesh))
    w_lim = ws[-1]
    chi_lim = support_from_w(w_lim, mesh, eps_rel)
    if not chi_lim.any():
        raise ValidationError("limit energy function has empty support")
    lam_lim = solve_eigs(system, chi_lim, M, K=K, seed=seed).eigenvalues
    vol_lim = volume(chi_lim, mesh)
    terms = [TermRecord(n, system.l2_norm(ws[n] - w_lim), lams[n], vols[n], Es[n]) for n in range(N)]
    tail_vol = min(vols[-tail:])
    vol_margin = tail_vol - vol_lim
    lam_tail = np.min(np.array(lams[-tail:]), axis=0)
    lam_margins = [float(lam_tail[k] - lam_lim[k]) for k in range(K)]
    lam_semi = [bool(lam_lim[k] <= lam_tail[k] + tol_lambda * abs(lam_lim[k])) for k in range(K)]
    cont = []
    for k in range(K):
        gaps = np.abs(np.array([lams[n][k] for n in range(N)]) - lam_lim[k])
        cont.append(bool(np.all(np.diff(gaps) <= tol_lambda * abs(lam_lim[k]))))
    return SequenceDiagnostic(terms, w_lim, chi_lim, vol_lim, lam_lim, tail, tol_volume, tol_lambda,
                              bool(vol_lim <= tail_vol + tol_volume), lam_semi, cont, float(vol_margin),
                              lam_margins)


# ----------------------------------------------------------------------
# level sets and the co-area chain
# ----------------------------------------------------------------------


def superlevel_area(u, mesh: Mesh, t) -> np.ndarray:
    """Exact measure of ``{u > t}`` for a P1 field, vectorized over ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    vals = np.sort(np.asarray(u, dtype=float)[mesh.triangles], axis=1)
    a, b, c = vals.T
    A = mesh.areas
    order = np.argsort(t, kind="stable")
    ts = t[order]
    # cells lying entirely above a level
    ia = np.argsort(a, kind="stable")
    csum = np.concatenate([[0.0], np.cumsum(A[ia])])
    below = np.searchsorted(a[ia], ts, side="right")
    res = csum[-1] - csum[below]
    # cells straddling a level: a <= t < c
    lo = np.searchsorted(ts, a, side="left")
    hi = np.searchsorted(ts, c, side="left")
    n = np.maximum(hi - lo, 0)
    if n.sum():
        cell = np.repeat(np.arange(len(A)), n)
        start = np.repeat(np.cumsum(n) - n, n)
        lvl = np.repeat(lo, n) + np.arange(n.sum()) - start
        T, ca, cb, cc, cA = ts[lvl], a[cell], b[cell], c[cell], A[cell]
        with np.errstate(divide="ignore", invalid="ignore"):
            part = np.where(T < cb, cA * (1.0 - (T - ca) ** 2 / ((cb - ca) * (cc - ca))),
                            cA * (cc - T) ** 2 / ((cc - ca) * (cc - cb)))
        res += np.bincount(lvl, weights=np.nan_to_num(part), minlength=len(ts))
    out = np.empty_like(res)
    out[order] = res
    return out


def coarea_lower_bound(u, mesh: Mesh, nlevels: int = 200, system: Optional[AssembledSystem] = None):
    """Riemann sum of ``L(t)**2 / |f'(t)|`` over quantile levels of ``u``.

    ``f(t) = |{u > t}|`` is evaluated exactly for the P1 field and ``L(t)``
    by marching triangles at interval midpoints.  Returns ``(bound,
    dirichlet)`` where ``dirichlet`` is the stiffness energy of ``u``.
    """
    if nlevels < 10:
        raise ValidationError("nlevels must be at least 10")
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValidationError("u must be a vertex field")
    scale = float(np.abs(u).max())
    if scale == 0 or u.max() - u.min() <= 1e-14 * scale:
        raise ValidationError("u is constant; its level sets are degenerate")
    if u.min() < -1e-10 * scale:
        raise ValidationError("co-area bound needs a nonnegative field")
    u = np.maximum(u, 0.0)
    levels = np.unique(np.quantile(u, np.linspace(0.0, 1.0, nlevels + 1)))
    f = superlevel_area(u, mesh, levels)
    total = 0.0
    for k in range(len(levels) - 1):
        dt = levels[k + 1] - levels[k]
        df = f[k] - f[k + 1]
        if dt <= 0 or df <= 0:
            continue
        L = contour_length(u, mesh, 0.5 * (levels[k] + levels[k + 1]))
        total += L * L * dt * dt / df
    if system is None:
        system = assemble(mesh)
    dirichlet = float(u @ (system.stiffness @ u))
    return total, dirichlet


# ----------------------------------------------------------------------
# rearrangement in sectors
# ----------------------------------------------------------------------


def _opening(spec: DomainSpec) -> float:
    if spec.kind == "sector":
        return spec.alpha
    if spec.kind == "half_plane":
        return math.pi / 2
    raise ValidationError("symmetrization is defined for sector and half_plane containers")


def distribution_function(u, mesh: Mesh, t) -> np.ndarray:
    return superlevel_area(u, mesh, t)


def symmetrize_sector(u, mesh: Mesh, spec: DomainSpec, refine: int = 4, sweeps: int = 6) -> np.ndarray:
    """Radially decreasing rearrangement around the apex (origin).

    The result at distance ``r`` is the level ``t`` whose superlevel set of
    ``u`` has measure ``alpha * r**2``, the measure of the disc sector of
    radius ``r`` inside the container.  The discrete superlevel sets of the
    interpolated result are polygons rather than disc sectors, so up to
    ``sweeps`` corrections replace ``alpha * r**2`` by the measured area of
    ``{v > v_i}``; the iterate whose distribution best matches ``u`` wins.
    """
    alpha = _opening(spec)
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValidationError("u must be a vertex field")
    scale = float(np.abs(u).max())
    if scale == 0:
        return np.zeros_like(u)
    if u.min() < -1e-10 * scale:
        raise ValidationError("rearrangement needs a nonnegative field")
    u = np.maximum(u, 0.0)
    vals = np.unique(u)
    # dense level grid: vertex values plus interior subdivisions
    steps = np.linspace(0.0, 1.0, refine + 1)[:-1]
    grid = (vals[:-1, None] + np.diff(vals)[:, None] * steps[None, :]).ravel()
    grid = np.append(grid, vals[-1])
    mu = superlevel_area(u, mesh, grid)  # nonincreasing

    def ustar(s):
        # u*(s) = inf{t : mu(t) <= s}; interpolate on the decreasing curve
        out = np.interp(s, mu[::-1], grid[::-1], left=grid[-1], right=0.0)
        out[s >= mu[0]] = 0.0 if mu[0] > 0 else out[s >= mu[0]]
        return out

    v = ustar(alpha * np.sum(mesh.vertices**2, axis=1))
    best, best_err = v, np.abs(superlevel_area(v, mesh, grid) - mu).max()
    for _ in range(sweeps):
        v = ustar(superlevel_area(v, mesh, v))
        err = np.abs(superlevel_area(v, mesh, grid) - mu).max()
        if err < best_err:
            best, best_err = v, err
    return best


# ----------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------


def _fit_exponent(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _lp_norm(f, mesh: Mesh, chi, p) -> float:
    inside = chi > 0.5
    fc = np.abs(np.asarray(f)[mesh.triangles]).mean(axis=1)
    if p == math.inf:
        return float(np.abs(np.asarray(f)[mesh.triangles[inside]]).max())
    return float((fc[inside] ** p @ mesh.areas[inside]) ** (1.0 / p))


def bounds_report(chi, system: AssembledSystem, M: float, f=None, p: float = math.inf,
                  scales=(0.5, 1.0, 2.0), d: int = 2, seed: int = 0) -> list:
    """Energy-function bounds and scaling fits, one :class:`CheckRow` each."""
    mesh = system.mesh
    chi = check_density(chi, mesh)
    vol = volume(chi, mesh)
    if vol <= 0:
        raise ValidationError("drop is empty")
    w, E1 = energy_function(system, chi, M)
    lam = solve_eigs(system, chi, M, seed=seed).lambda1
    rows = [
        _le("stiffness_w_le_4vol_over_lambda", float(w @ (system.stiffness @ w)), 4.0 * vol / lam),
        _le("mass_w_le_4vol_over_lambda2", float(w @ (system.mass @ w)), 4.0 * vol / lam**2),
    ]
    vols, inv_lams, ufs = [], [], []
    for s in scales:
        sm = mesh.scaled(s)
        ss = assemble(sm, system.robin_k)
        Ms = M / s**2
        vols.append(volume(chi, sm))
        inv_lams.append(1.0 / solve_eigs(ss, chi, Ms, seed=seed).lambda1)
        if f is not None:
            ufs.append(float(np.abs(solve_poisson(ss, chi, Ms, f)).max()))
    expo = _fit_exponent(vols, inv_lams)
    target = 2.0 / d
    rows.append(CheckRow("inv_lambda_volume_exponent", expo, target, 0.05 - abs(expo - target),
                         abs(expo - target) <= 0.05))
    if f is not None:
        fvals = np.full(mesh.n_vertices, float(f)) if np.isscalar(f) else np.asarray(f, dtype=float)
        ratios = []
        for s, uf in zip(scales, ufs):
            sm = mesh.scaled(s)
            vs = volume(chi, sm)
            ratios.append(uf / (_lp_norm(fvals, sm, chi, p) * vs ** (2.0 / d - (0.0 if p == math.inf else 1.0 / p))))
        # with fixed nodal values of f the norm of f grows like |drop|^(1/p)
        expected = 2.0 / d
        expo_f = _fit_exponent(vols, ufs)
        rows.append(CheckRow("poisson_sup_volume_exponent", expo_f, expected,
                             0.05 * expected - abs(expo_f - expected), abs(expo_f - expected) <= 0.05 * expected))
        rows.append(CheckRow("poisson_sup_ratio_spread", max(ratios), min(ratios),
                             0.05 - (max(ratios) / min(ratios) - 1), max(ratios) / min(ratios) - 1 <= 0.05))
    return rows


def strip_isoperimetric_ratio(chi, mesh: Mesh) -> float:
    """``P(drop)**2 / (2 pi |drop|)`` with the cell-edge perimeter (>= 1 up to staircase effects)."""
    vol = volume(chi, mesh)
    if vol <= 0:
        raise ValidationError("drop is empty")
    return relative_perimeter(chi, mesh) ** 2 / (2.0 * math.pi * vol)
