"""Exception hierarchy shared across the package."""


class WeatherCNNError(Exception):
    """Base class for all package errors."""


class ShapeError(WeatherCNNError, ValueError):
    """Array extents are invalid or incompatible."""


class StateError(WeatherCNNError, RuntimeError):
    """A layer was asked for a backward pass without a matching forward."""


class ConfigError(WeatherCNNError, ValueError):
    """A network or search-space configuration is invalid."""


class ValidationError(WeatherCNNError, ValueError):
    """User-supplied data or arguments fail validation."""


class FormatError(WeatherCNNError, ValueError):
    """A binary or text file does not follow its declared format.

    ``offset`` is the byte offset (binary files) or 1-based line number
    (text files) where the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
