"""Exception types shared across the package."""


class SpikeGradError(Exception):
    """Base class for all package errors."""


class ParameterError(SpikeGradError, ValueError):
    """A physical or numerical parameter lies outside its domain."""


class ShapeError(SpikeGradError, ValueError):
    """Array dimensions are inconsistent with the network structure."""


class SpecError(SpikeGradError, ValueError):
    """A structural specification (selector, coupling, layer wiring) is invalid."""


class DomainError(SpikeGradError, ValueError):
    """An argument is outside the domain of an operation."""


class UsageError(SpikeGradError, RuntimeError):
    """An API was called in a state or combination it does not support."""


class LockingError(UsageError):
    """A loss head that needs the whole trial was used where per-step evaluation is required."""


class ConfigError(SpikeGradError, ValueError):
    """A configuration file or object failed validation."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
