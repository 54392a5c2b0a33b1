"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain of a model formula."""


class ConfigError(ValueError):
    """A scenario or solver configuration is invalid."""


class ScenarioInfeasibleError(RuntimeError):
    """No allocation passes the solver preflight check."""


class NumericError(FloatingPointError):
    """A non-finite value appeared inside an iterative solver."""


class TapeError(ValueError):
    """A recorded unroll tape does not match the supplied loss gradients."""
