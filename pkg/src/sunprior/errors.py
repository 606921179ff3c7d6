"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit-code taxonomy, so every module raises one of
these rather than a bare ``ValueError``.
"""


class SunpriorError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DomainError(SunpriorError, ValueError):
    """Input outside the mathematical domain of an operation."""


class RangeError(DomainError):
    """Coordinates or timestamps outside the supported window."""


class ContractError(SunpriorError, ValueError):
    """Shape mismatch, empty input or violated precondition."""


class ParseError(SunpriorError, ValueError):
    """Malformed input record."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(SunpriorError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    """Optimization diverged."""


class FreezeViolation(ContractError):
    """A parameter set documented as frozen changed during training."""


class PipelineOrderError(SunpriorError):
    """An upstream artifact required by a stage is missing."""

    exit_code = 3

    def __init__(self, stage):
        self.stage = stage
        super().__init__(f"missing upstream artifact from stage '{stage}'")
