"""P1 finite elements for mixed Dirichlet/Neumann/Robin problems on drops.

The drop enters only through a cell-wise mass penalty ``M * (1 - chi)``;
vertices on artificial truncation edges are eliminated (homogeneous Dirichlet).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GeometryError, SolverError, ValidationError
from .geometry import EdgeTag, Mesh, check_density

logger = logging.getLogger(__name__)

_MASS_LOCAL = (np.ones((3, 3)) + np.eye(3)) / 12.0
_EDGE_LOCAL = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    """Global operators on all mesh vertices plus the free-dof bookkeeping."""

    mesh: Mesh
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    robin: sp.csr_matrix
    robin_k: float
    constrained_dofs: np.ndarray
    free_dofs: np.ndarray
    cell_mass_local: np.ndarray = field(repr=False)  # (ncells, 9) local mass entries
    cell_rows: np.ndarray = field(repr=False)
    cell_cols: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    def energy(self, u) -> float:
        """Unpenalized quadratic form <(stiffness + robin) u, u>."""
        u = np.asarray(u, dtype=float)
        return float(u @ (self.stiffness @ u) + u @ (self.robin @ u))

    def l2_inner(self, u, v) -> float:
        return float(np.asarray(u) @ (self.mass @ np.asarray(v)))

    def l2_norm(self, u) -> float:
        return float(np.sqrt(max(self.l2_inner(u, u), 0.0)))


@dataclass(frozen=True, eq=False)
class SpectralResult:
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (K, n_vertices), mass-orthonormal
    residuals: np.ndarray
    penalty_M: float
    info: dict = field(default_factory=dict)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def u1(self) -> np.ndarray:
        return self.eigenfunctions[0]


def assemble(mesh: Mesh, robin_k: float = 0.0) -> AssembledSystem:
    """Assemble stiffness, mass and Robin operators with exact P1 quadrature."""
    if robin_k < 0 or not np.isfinite(robin_k):
        raise ValidationError("robin coefficient must be a finite nonnegative number")
    areas = mesh.signed_areas
    if np.any(areas < 1e-14 * mesh.h**2):
        raise GeometryError("degenerate or inverted triangle in mesh")
    tri = mesh.triangles
    p = mesh.vertices[tri]
    # gradient coefficients of the barycentric coordinates (times 2A)
    b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
    kloc = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * areas[:, None, None])
    mloc = areas[:, None, None] * _MASS_LOCAL[None]
    rows = np.repeat(tri, 3, axis=1)
    cols = np.tile(tri, (1, 3))
    n = mesh.n_vertices
    shape = (n, n)
    stiffness = sp.coo_matrix((kloc.reshape(-1), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    mass = sp.coo_matrix((mloc.reshape(-1), (rows.ravel(), cols.ravel())), shape=shape).tocsr()

    neu = mesh.boundary_edges[mesh.edge_tags == EdgeTag.NEUMANN]
    if robin_k > 0 and neu.size:
        L = np.linalg.norm(mesh.vertices[neu[:, 1]] - mesh.vertices[neu[:, 0]], axis=1)
        eloc = robin_k * L[:, None, None] * _EDGE_LOCAL[None]
        erows = np.repeat(neu, 2, axis=1)
        ecols = np.tile(neu, (1, 2))
        robin = sp.coo_matrix((eloc.reshape(-1), (erows.ravel(), ecols.ravel())), shape=shape).tocsr()
    else:
        robin = sp.csr_matrix(shape)
    constrained = mesh.constrained_vertices
    free = np.setdiff1d(np.arange(n), constrained)
    if free.size == 0:
        raise GeometryError("every vertex is constrained")
    return AssembledSystem(mesh, stiffness, mass, robin, float(robin_k), constrained, free,
                           mloc.reshape(-1, 9), rows, cols)


def _check_M(M):
    if not (np.isfinite(M) and M > 0):
        raise ValidationError(f"penalty M must be positive, got {M}")


def penalty_operator(chi, M: float, system: AssembledSystem) -> sp.csr_matrix:
    """``M * integral (1 - chi) u v`` assembled cell by cell."""
    _check_M(M)
    chi = check_density(chi, system.mesh)
    weight = M * (1.0 - chi)
    data = (system.cell_mass_local * weight[:, None]).reshape(-1)
    n = system.n
    return sp.coo_matrix((data, (system.cell_rows.ravel(), system.cell_cols.ravel())),
                         shape=(n, n)).tocsr()


def _reduced(system: AssembledSystem, chi, M):
    A = system.stiffness + system.robin + penalty_operator(chi, M, system)
    f = system.free_dofs
    A = A[f][:, f].tocsc()
    B = system.mass[f][:, f].tocsc()
    return A, B


def _factor(mat):
    try:
        lu = spla.splu(mat.tocsc())
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    return lu


def _residuals(A, B, lam, X):
    R = A @ X - (B @ X) * lam[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(B @ X, axis=0)


def _diameter(mesh: Mesh) -> float:
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return float(np.hypot(*(hi - lo)))


def solve_eigs(system: AssembledSystem, chi, M: float, K: int = 1, tol: float = 1e-8,
               seed: int = 0, maxiter: int = 20, sigma: float | None = None) -> SpectralResult:
    """Smallest ``K`` eigenpairs of ``(stiffness + robin + penalty) u = lambda mass u``.

    Shift-invert Lanczos (ARPACK) around a negative shift with a sparse LU of
    the shifted operator, followed if needed by block inverse iteration with
    Rayleigh-Ritz until every residual ``||(A - lambda B) u|| / ||B u||`` is
    below ``tol``.  Eigenfunctions are mass-orthonormal with nonnegative sum.
    """
    if int(K) != K or K < 1:
        raise ValidationError("K must be a positive integer")
    K = int(K)
    _check_M(M)
    chi = check_density(chi, system.mesh)
    if chi @ system.mesh.areas <= 0:
        raise ValidationError("drop has zero volume")
    A, B = _reduced(system, chi, M)
    nfree = A.shape[0]
    if K >= nfree - 1:
        raise ValidationError(f"K={K} too large for {nfree} free dofs")
    if sigma is None:
        sigma = -1.0 / _diameter(system.mesh) ** 2
    lu = _factor(A - sigma * B)
    opinv = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=float)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(nfree)
    try:
        lam, X = spla.eigsh(A, k=K, M=B, sigma=sigma, which="LM", OPinv=opinv, v0=v0,
                            tol=0.0 if tol <= 0 else min(tol * 1e-2, 1e-10), maxiter=maxiter * nfree)
    except spla.ArpackNoConvergence as exc:
        lam, X = exc.eigenvalues, exc.eigenvectors
        if lam.size < K:
            raise SolverError("eigensolver did not converge", best_residual=np.inf) from exc
    order = np.argsort(lam)
    lam, X = lam[order], X[:, order]
    res = _residuals(A, B, lam, X)
    it = 0
    while res.max() > tol and it < maxiter:
        # block inverse iteration + Rayleigh-Ritz on a slightly larger block
        Y = lu.solve(np.asarray(B @ X))
        Ar = Y.T @ (A @ Y)
        Br = Y.T @ (B @ Y)
        lam_r, V = scipy.linalg.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
        X = Y @ V
        lam = lam_r
        res = _residuals(A, B, lam, X)
        it += 1
    if res.max() > tol:
        raise SolverError(f"eigen residual {res.max():.3e} above tolerance {tol:.1e}",
                          best_residual=float(res.max()))
    # mass-orthonormalize and fix signs
    G = X.T @ (B @ X)
    Lc = np.linalg.cholesky(0.5 * (G + G.T))
    X = np.linalg.solve(Lc, X.T).T
    full = np.zeros((K, system.n))
    full[:, system.free_dofs] = X.T
    for k in range(K):
        if full[k].sum() < 0:
            full[k] = -full[k]
    res = _residuals(A, B, lam, X)
    return SpectralResult(np.asarray(lam, dtype=float), full, res, float(M),
                          {"seed": seed, "sigma": sigma, "refinements": it, "tol": tol})


def _solve_spd(A, b, what="poisson", rtol=1e-10, maxref=5):
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    lu = _factor(A)
    x = lu.solve(b)
    r = b - A @ x
    k = 0
    while np.linalg.norm(r) > rtol * bnorm and k < maxref:
        x += lu.solve(r)
        r = b - A @ x
        k += 1
    rel = np.linalg.norm(r) / bnorm
    if not np.all(np.isfinite(x)) or rel > rtol:
        raise SolverError(f"{what} solve residual {rel:.3e} above {rtol:.0e}", best_residual=rel)
    return x


def _as_field(system: AssembledSystem, f, name="f") -> np.ndarray:
    if np.isscalar(f):
        return np.full(system.n, float(f))
    f = np.asarray(f, dtype=float)
    if f.shape != (system.n,) or not np.all(np.isfinite(f)):
        raise ValidationError(f"{name} must be a finite vertex field of length {system.n}")
    return f


def solve_poisson(system: AssembledSystem, chi, M: float, f) -> np.ndarray:
    """Minimizer of ``1/2 <A u, u> - <mass f, u>`` with ``A`` the penalized operator."""
    _check_M(M)
    chi = check_density(chi, system.mesh)
    if chi @ system.mesh.areas <= 0:
        raise ValidationError("drop has zero volume")
    f = _as_field(system, f)
    A, _ = _reduced(system, chi, M)
    rhs = (system.mass @ f)[system.free_dofs]
    u = np.zeros(system.n)
    u[system.free_dofs] = _solve_spd(A, rhs)
    return u


def energy_function(system: AssembledSystem, chi, M: float):
    """Return ``(w, E1)``: the torsion-type function of the drop and ``-1/2 * integral w``."""
    w = solve_poisson(system, chi, M, 1.0)
    E1 = -0.5 * float(system.mass.sum(axis=0).A1 @ w)
    return w, E1


def proximal(system: AssembledSystem, chi, M: float, m: float, u) -> np.ndarray:
    """Minimizer of ``<A v, v> + m * ||u - v||^2`` (vanishing on truncation dofs)."""
    _check_M(M)
    if not (np.isfinite(m) and m > 0):
        raise ValidationError("proximal parameter m must be positive")
    chi = check_density(chi, system.mesh)
    u = _as_field(system, u, "u")
    A, B = _reduced(system, chi, M)
    rhs = m * (system.mass @ u)[system.free_dofs]
    v = np.zeros(system.n)
    v[system.free_dofs] = _solve_spd((A + m * B).tocsc(), rhs, "proximal")
    return v


def cell_average_sq(u, mesh: Mesh) -> np.ndarray:
    """Exact cell mean of ``u**2`` for a P1 field."""
    a, b, c = (np.asarray(u, dtype=float)[mesh.triangles[:, i]] for i in range(3))
    return (a * a + b * b + c * c + a * b + b * c + c * a) / 6.0


def cell_integral_sq(u, mesh: Mesh) -> np.ndarray:
    return cell_average_sq(u, mesh) * mesh.areas


def rayleigh_quotient(system: AssembledSystem, chi, M: float, u) -> float:
    u = _as_field(system, u, "u").copy()
    u[system.constrained_dofs] = 0.0
    P = penalty_operator(chi, M, system)
    num = system.energy(u) + float(u @ (P @ u))
    return num / system.l2_inner(u, u)
