"""Exception types shared across the package."""


class RsadError(Exception):
    """Base class for errors raised by this package."""


class FormatError(RsadError):
    """A file on disk does not match the expected container layout."""


class ValidationError(RsadError, ValueError):
    """An in-memory value violates a documented precondition or invariant."""


class ShapeError(ValidationError):
    """An array has the wrong rank or a dimension that breaks a contract."""


class PlacementError(RsadError):
    """Region or object placement could not be satisfied after retrying."""


class ConfigurationError(RsadError):
    """A configuration value or resource set cannot support the request."""


class NumericalError(RsadError):
    """A numerical routine failed beyond what conditioning guards repair."""


class CheckpointError(RsadError):
    """A checkpoint file is unreadable or has an unsupported version."""
