"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class InfeasibleError(ValueError):
    """The data cannot satisfy the calibration or model constraints."""


class LoadError(ValueError):
    """A sample file failed validation."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""


class ScenarioConfigError(ValueError):
    """A simulation scenario cannot produce valid samples."""
