"""Exception hierarchy shared by every subsystem.

The CLI maps these onto its stable exit codes (see ``adapter.cli``).
"""


class AdapterError(Exception):
    """Base class for all package errors."""


class ShapeError(AdapterError, ValueError):
    """Operand extents are incompatible."""


class ParameterError(AdapterError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class NumericError(AdapterError, ArithmeticError):
    """Non-finite input or a failed numerical decomposition."""


class ContractError(AdapterError, RuntimeError):
    """A call violated an operation's precondition."""


class DataError(AdapterError):
    """A dataset is missing, malformed or too small for the request."""


class ConfigError(AdapterError):
    """Invalid run configuration. ``key`` holds the dotted key path."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(AdapterError):
    """A checkpoint is unreadable or incompatible with the current model."""
