"""Shared exception types. The CLI maps these onto exit codes."""


class GentleError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GentleError):
    """Invalid configuration: bad value, unknown variant, shape mismatch."""


class DataFormatError(GentleError):
    """On-disk artifact is malformed: bad magic, schema version, row counts."""


class MissingInputError(GentleError):
    """A required input file or directory does not exist."""
