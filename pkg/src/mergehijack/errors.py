"""Exception hierarchy shared by every module."""


class MergeHijackError(Exception):
    pass


class ShapeMismatch(MergeHijackError, ValueError):
    pass


class NonFiniteResult(MergeHijackError, ArithmeticError):
    pass


class FormatError(MergeHijackError, ValueError):
    pass


class ZeroVector(MergeHijackError, ValueError):
    pass


class ConfigError(MergeHijackError, ValueError):
    pass


class TokenOutOfRange(MergeHijackError, IndexError):
    pass


class EmptyInput(MergeHijackError, ValueError):
    pass


class SchemaError(MergeHijackError, ValueError):
    pass
