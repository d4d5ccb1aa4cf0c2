"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI maps it to.
"""


class SpectMambaError(Exception):
    exit_code = 1


class ValidationError(SpectMambaError, ValueError):
    """Malformed input data (shapes, ranges, label files)."""

    exit_code = 2


class ConfigError(SpectMambaError, ValueError):
    """Invalid configuration or manifest."""

    exit_code = 2


class NumericError(SpectMambaError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""

    exit_code = 3


class AudioIOError(SpectMambaError, OSError):
    """Unreadable or unwritable file."""

    exit_code = 4
