"""Exception and warning types shared across the package."""


class DepthAttackError(Exception):
    """Base class for all package errors."""


class ShapeError(DepthAttackError, ValueError):
    pass


class NumericsError(DepthAttackError, ArithmeticError):
    pass


class ConfigError(DepthAttackError, ValueError):
    pass


class DataError(DepthAttackError, ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass
