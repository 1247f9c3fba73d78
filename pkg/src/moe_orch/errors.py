"""Exception hierarchy.

``ConfigError`` maps to CLI exit code 1, everything under ``DataError`` to 2.
"""


class MoeOrchError(Exception):
    pass


class ConfigError(MoeOrchError):
    pass


class DataError(MoeOrchError):
    pass


class ShapeError(DataError, ValueError):
    pass


class TraceInvalidError(DataError):
    pass


class CalibrationIncompleteError(DataError):
    pass


class UndefinedRateError(DataError, ZeroDivisionError):
    pass


class InvalidAssignmentError(DataError):
    pass


class InvalidStepError(DataError):
    pass


class EnumerationBoundError(DataError):
    """Too many active experts for exhaustive partition search."""
