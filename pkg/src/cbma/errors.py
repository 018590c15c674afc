"""Exception hierarchy. Each top-level class maps onto one CLI exit code."""


class CBMAError(Exception):
    """Base class for every error raised by this package."""

    category = "error"
    exit_code = 1


class ConfigError(CBMAError, ValueError):
    category = "config"
    exit_code = 2


class DataError(CBMAError, ValueError):
    category = "data"
    exit_code = 3


class SchemaError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateBasisError(DataError):
    pass


class NumericError(CBMAError, ArithmeticError):
    category = "numeric"
    exit_code = 4


class DegenerateWeightError(NumericError):
    """All importance weights (or aggregation numerators) underflowed."""

    def __init__(self, message, y=None):
        super().__init__(message)
        self.y = y


class DegenerateEvidenceError(NumericError):
    pass


class GridQualityError(NumericError):
    pass


class GridTruncationError(NumericError):
    pass


class GridMismatchError(CBMAError, ValueError):
    category = "data"
    exit_code = 3


class UnsupportedOracleError(CBMAError, TypeError):
    category = "numeric"
    exit_code = 4
