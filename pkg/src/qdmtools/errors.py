"""Exception types raised by qdmtools."""


class QdmError(Exception):
    """Base class for all package errors."""


class FitError(QdmError, ValueError):
    """A spectral fit could not be set up (e.g. too few resonances found)."""

    def __init__(self, message: str, found: int | None = None, required: int | None = None):
        super().__init__(message)
        self.found = found
        self.required = required


class FilterError(QdmError, ValueError):
    """Filter parameters are outside the band supported by the map."""


class FormatError(QdmError, ValueError):
    """A QDMS/QDMF container violates one of its invariants."""

    def __init__(self, message: str, invariant: str = ""):
        super().__init__(message)
        self.invariant = invariant


class ConfigError(QdmError, ValueError):
    """A run configuration failed schema validation."""
