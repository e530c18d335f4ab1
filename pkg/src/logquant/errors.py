"""Exception hierarchy shared by every module of the toolkit."""


class LogQuantError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LogQuantError, ValueError):
    """An argument or object violates a documented invariant."""


class DomainError(LogQuantError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class DataError(LogQuantError, ValueError):
    """Tensor payload contains values the toolkit refuses (NaN/Inf)."""


class DegenerateError(LogQuantError, ValueError):
    """No positive scale can be derived, e.g. an all-zero tensor."""

    def __init__(self, message: str, tensor_name: str | None = None):
        super().__init__(message)
        self.tensor_name = tensor_name


class FormatError(LogQuantError):
    """A file does not conform to the .lqta / .lqnm layout."""


class IoError(LogQuantError, OSError):
    """Reading or writing a file failed at the OS level."""


class CapacityError(LogQuantError, OverflowError):
    """The integer accumulator is too narrow for the requested product."""


class TrainingError(LogQuantError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
