"""Spectral drops: eigenvalue-minimizing subsets of unbounded containers, discretized with P1 elements."""

__version__ = "0.1.0"

from .errors import GeometryError, SolverError, SpectralDropError, ValidationError
from .geometry import Box, Disc, DomainSpec, EdgeTag, Mesh, build_mesh, relative_perimeter, volume
from .pde import assemble, energy_function, solve_eigs, solve_poisson
from .optimize import OptimizerConfig, minimize_lambda1, optimality_report, penalized_minimize
from .analytic import bessel_j0_first_zero, reference_solution, strip_reference

__all__ = [
    "__version__", "GeometryError", "SolverError", "SpectralDropError", "ValidationError",
    "Box", "Disc", "DomainSpec", "EdgeTag", "Mesh", "build_mesh", "relative_perimeter", "volume",
    "assemble", "energy_function", "solve_eigs", "solve_poisson",
    "OptimizerConfig", "minimize_lambda1", "optimality_report", "penalized_minimize",
    "bessel_j0_first_zero", "reference_solution", "strip_reference",
]
