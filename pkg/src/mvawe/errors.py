"""Exception hierarchy shared across the package.

CLI exit codes are attached to each class so the entry point can map
failures without a lookup table.
"""


class MvaweError(Exception):
    exit_code = 1


class UsageError(MvaweError, ValueError):
    """A call that violates an operation's preconditions."""

    exit_code = 2


class ConfigurationError(MvaweError, ValueError):
    """Inconsistent hyperparameters, shapes or dataset composition."""

    exit_code = 2


class ValidationError(MvaweError, ValueError):
    """Input data that fails a domain invariant."""

    exit_code = 3


class DataError(MvaweError, IOError):
    """Unreadable or corrupt dataset / checkpoint files."""

    exit_code = 3


class NumericalError(MvaweError, FloatingPointError):
    """Non-finite values produced during computation."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
