"""Exception types raised across the package.

Names follow the error vocabulary used in the operation contracts; every
module raises these rather than bare ValueError so callers can dispatch.
"""


class ThermoconvError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ThermoconvError):
    """Operands have incompatible shapes."""


class NotStable(ThermoconvError):
    """A matrix required to be positively stable has spectrum touching
    or crossing the imaginary axis (margin 1e-12 on real parts)."""


class Overflow(ThermoconvError):
    """Matrix exponential argument outside the documented accuracy range."""


class SingularBlock(ThermoconvError):
    """Leading block of a Schur-complement split is singular or too
    ill-conditioned to invert."""


class SingularCovariance(ThermoconvError):
    """Covariance matrix is not positive definite."""


class SingularA(ThermoconvError):
    """Diffusion matrix is singular at a sampled point."""


class EmptyGrid(ThermoconvError):
    """A grid-based check received no points."""


class FastBlockNotPD(ThermoconvError):
    """Fast block of a symmetrized drift Jacobian is not positive definite;
    carries the offending point when known."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class InvalidBounds(ThermoconvError):
    """Structural-constant inputs violate their sign or ordering constraints."""


class SimulationBlowup(ThermoconvError):
    """A trajectory left the admissible region (|coordinate| > 1e8) or
    became non-finite."""


class SamplerNotConverged(ThermoconvError):
    """Stationary sampler diagnostics below the effective-sample threshold."""


class QuadratureDivergence(ThermoconvError):
    """Tail-truncation estimate of a quadrature exceeds its tolerance."""


class ConfigError(ThermoconvError):
    """Invalid experiment configuration; carries the offending field path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
