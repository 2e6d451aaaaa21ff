"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
NumericsError (and subclasses) -> 4.
"""


class ZslabError(Exception):
    pass


class ConfigError(ZslabError):
    """Invalid configuration, dimensions, or usage."""


class FormatError(ZslabError):
    """Corrupt or malformed file. Carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericsError(ZslabError):
    """NaN/Inf entering a graph, or training divergence."""


class DegenerateInputError(NumericsError):
    """Zero-norm vector where a direction is required."""
