"""Exception hierarchy shared across the package."""


class PatchTuneError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PatchTuneError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(PatchTuneError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(PatchTuneError, RuntimeError):
    """A precondition of an API call was violated."""


class ConfigError(PatchTuneError, ValueError):
    """A configuration is invalid or infeasible."""


class NotWarm(PatchTuneError):
    """A class queue has no entries to draw positives from."""


class NumericalError(PatchTuneError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class RunError(PatchTuneError, RuntimeError):
    """Training diverged or a matrix cell failed."""
