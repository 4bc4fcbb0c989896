class PopcornError(Exception):
    """Base class for package errors."""

    exit_code = 3


class ConfigError(PopcornError, ValueError):
    exit_code = 1


class DataError(PopcornError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """A file does not parse under its declared format."""


class ShapeError(DataError):
    pass
