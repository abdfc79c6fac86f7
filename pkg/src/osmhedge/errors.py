"""Exception hierarchy.

Numeric failures and configuration failures are kept apart so the CLI can map
them to distinct exit codes.
"""


class OSMHedgeError(Exception):
    """Base class for all package errors."""


class NumericError(OSMHedgeError):
    """A numerical routine hit an invalid state."""


class ConfigError(OSMHedgeError):
    """Invalid experiment configuration or incompatible inputs."""


class NotPositiveDefinite(NumericError):
    pass


class SingularDiffusion(NumericError):
    pass


class ShapeMismatch(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass


class DegenerateSpread(NumericError):
    pass


class MissingQuote(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at time step n={step}")
        self.step = step
        self.loss = loss


class InsufficientSample(NumericError):
    pass


class DegenerateSample(NumericError):
    pass


class ZeroNormalizer(NumericError):
    pass


class IncompatibleArtifact(ConfigError):
    pass


class NoReports(ConfigError):
    pass
