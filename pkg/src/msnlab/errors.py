"""Exception types raised across msnlab."""


class MsnlabError(Exception):
    """Base class for all library errors."""


class ArgumentError(MsnlabError, ValueError):
    pass


class ShapeError(MsnlabError, ValueError):
    pass


class DegenerateMatrixError(MsnlabError, ArithmeticError):
    pass


class StateError(MsnlabError, ValueError):
    """Power-iteration or running-statistics state does not match its weight."""


class BatchSizeError(MsnlabError, ValueError):
    pass


class FormatError(MsnlabError, ValueError):
    """Malformed IDX payload (bad magic, truncated body, count mismatch)."""


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ConfigError(MsnlabError, ValueError):
    pass


class NumericalGuardError(MsnlabError, ArithmeticError):
    pass


class NonFiniteGradientError(MsnlabError, FloatingPointError):
    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = list(offending or [])
