"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config errors exit 2, data
errors exit 3, numerical failures exit 4.
"""


class GridCompError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(GridCompError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(GridCompError):
    """Run configuration is missing, malformed, or inconsistent."""


class DataError(GridCompError):
    """Input data is invalid (bad counts, orphan townships, ...)."""


class ParseError(DataError):
    """A data file could not be parsed; carries file and line context."""

    def __init__(self, message, path=None, line=None):
        ctx = ""
        if path is not None:
            ctx = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + ctx)
        self.path = path
        self.line = line


class ArchiveError(DataError):
    """A sample archive is unreadable."""


class ArchiveVersionError(ArchiveError):
    """Archive format version is not supported by this build."""


class ArchiveIntegrityError(ArchiveError):
    """Archive payload failed its checksum (truncated or corrupted)."""


class NumericalError(GridCompError):
    """A numerical operation failed (e.g. factorizing a non-PD matrix)."""

    def __init__(self, message, pivot_index=None):
        if pivot_index is not None:
            message = f"{message} (pivot index {pivot_index})"
        super().__init__(message)
        self.pivot_index = pivot_index
