"""Exception types raised across the package."""


class PicarError(Exception):
    """Base class for all package errors."""


class DegenerateDomainError(PicarError, ValueError):
    """The node set spans fewer than three non-collinear points."""


class OutOfMeshError(PicarError, ValueError):
    """A query location lies outside every triangle of the mesh."""

    def __init__(self, point, row=None):
        self.point = tuple(float(c) for c in point)
        self.row = row
        where = "" if row is None else f" (row {row})"
        super().__init__(f"point {self.point}{where} lies outside the mesh")


class EigensolverError(PicarError, RuntimeError):
    """The iterative eigensolver failed to converge."""

    def __init__(self, message, residual):
        self.residual = float(residual)
        super().__init__(f"{message}; attained residual {self.residual:.3e}")


class SingularKernelError(PicarError, ValueError):
    """The reduced prior precision M'QM is not positive definite."""


class CovarianceSingularError(PicarError, ValueError):
    """Cholesky factorisation of a covariance matrix failed after jitter."""


class SelectionFailedError(PicarError, RuntimeError):
    """Every candidate rank produced a non-converged GLM fit."""


class NonFiniteLikelihoodError(PicarError, FloatingPointError):
    """The log-likelihood evaluated to a non-finite value."""

    def __init__(self, index, iteration=None):
        self.index = int(index)
        self.iteration = iteration
        msg = f"non-finite log-likelihood contribution at observation {self.index}"
        if iteration is not None:
            msg += f" (iteration {iteration})"
        super().__init__(msg)


class ConfigError(PicarError, ValueError):
    """A study configuration failed validation.

    All problems found are collected in ``errors``.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.errors))
