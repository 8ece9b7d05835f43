"""Exception hierarchy shared by every subsystem.

Each class carries an ``exit_code`` so the CLI can map failures to
distinct process exit statuses without a lookup table elsewhere.
"""


class MonoTTSError(Exception):
    exit_code = 1


class ConfigError(MonoTTSError, ValueError):
    """A configuration or schedule violates its invariants."""

    exit_code = 3


class DimensionError(MonoTTSError, ValueError):
    exit_code = 3


class ContractError(MonoTTSError, ValueError):
    """A precondition of an operation does not hold."""

    exit_code = 3


class InputError(MonoTTSError, ValueError):
    exit_code = 3


class NumericError(MonoTTSError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""

    exit_code = 5


class DivergenceError(NumericError):
    exit_code = 5


class BundleFormatError(MonoTTSError):
    exit_code = 4
