"""Exception hierarchy shared across the package."""


class RsdError(Exception):
    """Base class for every error raised by rsdistill."""


class ShapeError(RsdError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(RsdError, ValueError):
    """An input lies outside the mathematical domain of an op."""


class ContractError(RsdError, RuntimeError):
    """A call violated an API precondition (e.g. backward on a non-scalar)."""


class BatchTooSmallError(RsdError, ValueError):
    """Batch statistics need at least two rows."""


class ConfigError(RsdError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(RsdError, ValueError):
    """Malformed binary or text input file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(RsdError, ValueError):
    """Two inputs that must agree do not (e.g. image and label counts)."""


class PlanError(RsdError, ValueError):
    """A batching plan cannot be applied to a dataset."""


class NumericalError(RsdError, ArithmeticError):
    """Training produced a non-finite loss."""
