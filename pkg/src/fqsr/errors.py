"""Exception hierarchy shared by all fqsr modules."""


class FQSRError(Exception):
    pass


class RangeError(FQSRError, ValueError):
    """A value does not fit the requested integer range."""


class ShapeError(FQSRError, ValueError):
    pass


class ParameterError(FQSRError, ValueError):
    pass


class StateError(FQSRError, RuntimeError):
    pass


class ConfigError(FQSRError, ValueError):
    pass


class NumericError(FQSRError, ArithmeticError):
    pass
