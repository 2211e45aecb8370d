"""Exception hierarchy shared by every stage of the pipeline.

``ConfigError`` marks problems with user-supplied configuration (CLI exit
code 2); every other ``DecodeError`` is a data problem (exit code 3).
"""


class DecodeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DecodeError):
    pass


class InsufficientData(DecodeError):
    pass


class InvalidTimestamps(DecodeError):
    pass


class OutOfBounds(DecodeError):
    pass


class ShapeError(DecodeError, ValueError):
    pass


class InvalidBaseline(DecodeError):
    pass


class InsufficientHistory(DecodeError):
    pass


class AlignmentError(DecodeError):
    pass


class StateError(DecodeError):
    pass


class UndefinedCorrelation(DecodeError):
    pass


class MissingData(DecodeError):
    pass


class InvalidBand(DecodeError):
    pass
