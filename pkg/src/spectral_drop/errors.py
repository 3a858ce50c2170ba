"""Exception hierarchy shared by all modules."""


class SpectralDropError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SpectralDropError, ValueError):
    """Invalid input: bad parameters, malformed fields, inconsistent sizes."""


class GeometryError(SpectralDropError, ValueError):
    """The requested region cannot be meshed (empty, degenerate, ...)."""


class SolverError(SpectralDropError, RuntimeError):
    """A linear or eigenvalue solve failed to reach its tolerance."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual
