"""Shared exception types, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad run configuration (exit code 2)."""


class DataError(Exception):
    """Unreadable, malformed, or inconsistent data (exit code 3)."""


class NumericalAbort(Exception):
    """Non-finite value encountered during training/inference (exit code 4)."""

    def __init__(self, message, step=None, report=None):
        super().__init__(message)
        self.step = step
        self.report = report
