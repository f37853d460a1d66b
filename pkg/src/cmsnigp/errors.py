"""Exception types shared across the package."""


class CmsNigpError(Exception):
    """Base class for all package errors."""


class ConfigError(CmsNigpError, ValueError):
    """Invalid user-supplied configuration or arguments."""


class SketchFormatError(CmsNigpError, ValueError):
    """A serialized sketch could not be decoded."""


class NumericalError(CmsNigpError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy value."""


class QuadratureError(NumericalError):
    """Adaptive quadrature did not converge.

    The last two estimates (log-space) are kept so callers can judge how far
    off the result was.
    """

    def __init__(self, message, previous=None, last=None):
        super().__init__(message)
        self.previous = previous
        self.last = last


class AlphaBoundaryError(NumericalError):
    """The likelihood maximizer sits on the edge of the search grid."""

    def __init__(self, message, alpha=None):
        super().__init__(message)
        self.alpha = alpha


class ParseError(CmsNigpError, ValueError):
    """Malformed input data file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
