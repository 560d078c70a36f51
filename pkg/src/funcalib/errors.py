"""Exception types raised across the package."""


class FuncalibError(Exception):
    """Base class for all package-specific errors."""


class DomainError(FuncalibError):
    """An input lies outside the mathematical domain of an operation."""


class ShapeError(FuncalibError):
    """Array dimensions or lengths are inconsistent."""


class DegenerateScaleError(FuncalibError):
    """A covariate column is constant and cannot be min-max scaled."""


class DegenerateSpectrumError(FuncalibError):
    """No positive eigenvalue survives the spectrum cutoff."""


class ContractError(FuncalibError):
    """A documented precondition was violated by the caller."""


class SeparationError(FuncalibError):
    """Logistic fit diverged (complete or quasi-complete separation)."""


class SingularityError(FuncalibError):
    """A linear system or Jacobian is singular."""


class ConvergenceError(FuncalibError):
    """An iterative solver failed to converge."""


class InitializationError(FuncalibError):
    """A solver could not start from the supplied initial point."""


class ConfigError(FuncalibError):
    """A configuration value is out of its documented range."""


class InputError(FuncalibError):
    """User-supplied data failed validation (bad file, bad value)."""


class NumericError(FuncalibError):
    """A numerical operation failed beyond recoverable tolerance."""


class RescaleOverflowError(FuncalibError):
    """Proportional probability scaling pushed values past 1."""
