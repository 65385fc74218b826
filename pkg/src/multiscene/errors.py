"""Exception types shared across the package.

Each class marks one failure family so callers (and the CLI) can map
failures to stable, machine-readable categories.
"""


class MultisceneError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(MultisceneError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(MultisceneError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(MultisceneError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ConfigurationError(MultisceneError, ValueError):
    """A configuration value is invalid or inconsistent."""


class BudgetError(MultisceneError, ValueError):
    """A selection budget exceeds what the pool can provide.

    May carry partial results from the run that failed (``history``,
    ``model``) so prior iterations are not lost.
    """

    def __init__(self, message, history=None, model=None):
        super().__init__(message)
        self.history = history
        self.model = model


class PoolError(MultisceneError, ValueError):
    """Pool bookkeeping went inconsistent (duplicate or unknown ids)."""


class NoSignalError(MultisceneError, ValueError):
    """Every label in a training set is masked; nothing to learn from."""


class FormatError(MultisceneError, ValueError):
    """A serialized artifact is corrupt or truncated."""


class VersionError(FormatError):
    """A serialized artifact has an unsupported format version."""


class DeterminismError(MultisceneError, RuntimeError):
    """A function expected to be deterministic produced differing values."""
