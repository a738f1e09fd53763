"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`NVChargeError`; the CLI maps the subclasses onto exit codes.
"""


class NVChargeError(Exception):
    """Base class for package errors."""


class ValidationError(NVChargeError, ValueError):
    """An input violates an operation's preconditions."""


class DegenerateFieldError(ValidationError):
    """Dark/bright states are undefined because the transverse coupling vanishes."""


class SingularPositionError(ValidationError):
    """A point source sits at the sensor position."""


class GridTooCoarseError(ValidationError):
    """Frequency grid spacing exceeds half the Lorentzian linewidth."""


class SingularDesignError(ValidationError):
    """Amplitude/offset problem is singular (constant model curve)."""


class DegenerateDataError(ValidationError):
    """Data carries no spectral information (e.g. a flat trace)."""


class InsufficientSpanError(ValidationError):
    """Too few points, or too narrow a microwave-angle span, to fit."""


class ZeroFieldError(ValidationError):
    """Charge localization needs a nonzero electric field."""


class ConvergenceError(NVChargeError, RuntimeError):
    """An optimizer failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SchemaVersionError(NVChargeError, ValueError):
    """A file declares an unsupported schema major version."""


class ParseError(NVChargeError, ValueError):
    """Malformed input file; message includes line/column diagnostics."""
