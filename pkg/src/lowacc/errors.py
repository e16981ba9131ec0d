"""Exception types shared across the package.

Each class carries the process exit code the command line maps it to.
"""


class LowaccError(Exception):
    exit_code = 1


class ConfigError(LowaccError, ValueError):
    """Invalid run configuration or argument combination."""

    exit_code = 2


class FormatError(LowaccError, OSError):
    """Malformed, truncated or unreadable file."""

    exit_code = 3


class PreconditionError(LowaccError, ValueError):
    """A numeric precondition of an operation does not hold."""

    exit_code = 4
