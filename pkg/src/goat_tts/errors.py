"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``goat_tts.cli``).
"""


class ArgumentError(ValueError):
    """Bad argument: shape, range or axis out of contract."""


class FormatError(ValueError):
    """A file or token stream does not follow the documented format."""


class DataError(ValueError):
    """Training or evaluation data violates a data contract."""


class StateError(RuntimeError):
    """Operation not valid in the current session state."""


class DependencyError(RuntimeError):
    """A prerequisite artifact (checkpoint, snapshot, data file) is missing."""
