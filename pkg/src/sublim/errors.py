"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
``ConfigError`` -> 2, ``DataError`` -> 3, ``NumericalError`` -> 4.
"""


class SublimError(Exception):
    pass


class ConfigError(SublimError, ValueError):
    pass


class ShapeError(ConfigError):
    pass


class EncodingError(SublimError, ValueError):
    pass


class DataError(SublimError):
    pass


class IdxFormatError(DataError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class NumericalError(SublimError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass


class UndefinedRatioError(NumericalError):
    pass


class UndefinedChiError(NumericalError):
    pass
