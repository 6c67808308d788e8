"""Exception types shared across the package."""


class WecsError(Exception):
    """Base class for all package errors."""


class DimensionError(WecsError):
    """An operator or state was requested with an invalid dimension."""


class SignatureError(WecsError):
    """Mismatched or malformed tensor-space signatures / labels."""


class TruncationError(WecsError):
    """A truncated construction would discard too much weight."""


class NonHermitianError(WecsError):
    """A Hermitian matrix was required but not supplied."""


class IntegrationError(WecsError):
    """The ODE integrator failed (e.g. step-size underflow).

    Carries the time at which integration broke down in ``t_failure``.
    """

    def __init__(self, message: str, t_failure: float | None = None):
        super().__init__(message)
        self.t_failure = t_failure


class AccuracyError(WecsError):
    """A solution violated an accuracy guarantee (e.g. trace drift)."""


class InfeasibleParameterError(WecsError):
    """Requested protocol target cannot be reached with these parameters."""


class ConfigError(WecsError):
    """Invalid run configuration (bad key, unit, or sweep spec)."""
