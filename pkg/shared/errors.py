"""Exception hierarchy shared by every service."""

from __future__ import annotations


class DmAdaError(Exception):
    """Base class for all expected failures."""


class DimensionError(DmAdaError, ValueError):
    pass


class DomainError(DmAdaError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(DmAdaError, ArithmeticError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, term: str, value: float) -> None:
        super().__init__(f"loss term '{term}' is not finite ({value})")
        self.term = term
        self.value = value


class MissingGradientError(DmAdaError, RuntimeError):
    pass


class IdxFormatError(DmAdaError, ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class DatasetError(DmAdaError, ValueError):
    pass


class ConfigError(DmAdaError, ValueError):
    pass


class CheckpointError(DmAdaError, ValueError):
    pass


class MalformedInputError(DmAdaError, ValueError):
    pass
