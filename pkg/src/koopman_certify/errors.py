"""Exception hierarchy.

The CLI maps :class:`UsageError` to exit code 2 and :class:`NumericalError`
(and subclasses) to exit code 3.
"""


class KoopmanError(Exception):
    """Base class for all package errors."""


class UsageError(KoopmanError, ValueError):
    """Invalid arguments, dimensions or configuration."""


class NumericalError(KoopmanError, ArithmeticError):
    """A computation produced non-finite or unusable numbers."""


class DivergenceError(NumericalError):
    """A trajectory left the blow-up ball."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class RankDeficiencyError(NumericalError):
    """A Gram matrix is singular beyond what regularization can handle."""


class SamplingError(NumericalError):
    """Rejection sampling accepted too few points."""


class MeshError(UsageError):
    """Invalid finite element mesh parameters."""


class SizeError(UsageError):
    """A dictionary would exceed the configured size cap."""


class AssemblyError(UsageError):
    """Fits cannot be combined into a bilinear surrogate."""
