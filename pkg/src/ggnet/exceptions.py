"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line interface:
2 for configuration problems, 3 for data problems, 4 for numeric failures.
"""


class GgNetError(Exception):
    exit_code = 1


class ConfigError(GgNetError, ValueError):
    exit_code = 2


class DataError(GgNetError, ValueError):
    exit_code = 3


class NumericError(GgNetError, ArithmeticError):
    exit_code = 4


class ShapeError(ConfigError):
    pass


class InvalidKernelError(ConfigError):
    pass


class SplitError(DataError):
    pass


class UnstandardizableChannelError(DataError):
    pass


class GeometryError(DataError):
    pass


class CalibrationError(DataError):
    pass


class FormatError(DataError):
    pass


class CatalogueError(DataError):
    pass


class FetchError(DataError):
    pass


class ParseError(DataError):
    pass


class UndefinedMetricError(DataError):
    pass


class OracleUnavailableError(DataError):
    pass


class EmptyBatchError(DataError):
    """A loss had no weighted entries; the caller should skip the batch."""


class NonFiniteGradientError(NumericError):
    """Raised by the optimizer instead of applying a step with NaN/inf gradients."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class DivergenceError(NumericError):
    """Training produced a non-finite loss; ``params`` holds the last good state."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params

