"""Exception hierarchy shared across the package."""


class PSCRError(Exception):
    """Base class for all errors raised by pscr."""


class ValidationError(PSCRError, ValueError):
    """Invalid user-supplied input or configuration."""


class DimensionError(ValidationError):
    """Array shapes do not conform."""


class BoundsError(ValidationError):
    """A sampling window falls outside the image."""


class ConfigurationError(ValidationError):
    """A model or run is configured inconsistently with the requested operation."""


class FormatError(ValidationError):
    """A file on disk is malformed."""


class UndefinedCorrelationError(ValidationError):
    """Correlation requested for a constant vector."""


class NonFiniteError(PSCRError, ArithmeticError):
    """A NaN or infinity appeared where finite numbers are required."""
