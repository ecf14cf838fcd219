"""Exception hierarchy shared by every erifusion module."""


class FusionError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FusionError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class DataError(FusionError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Binary file does not match the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(DataError):
    """A sample handed to the model violates the alignment contract."""


class EnsembleError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericalError(FusionError, ArithmeticError):
    exit_code = 4
