"""Exception types shared across the package."""


class HogwildError(Exception):
    """Base class for all package errors."""


class DimensionError(HogwildError, ValueError):
    pass


class NumericError(HogwildError, ArithmeticError):
    pass


class UsageError(HogwildError, ValueError):
    pass


class InvariantError(HogwildError):
    """A parameter constraint (nonnegativity, norm bound) does not hold."""


class ConfigError(HogwildError, ValueError):
    pass


class ParseError(HogwildError, ValueError):
    pass
