"""Exception types shared across the package."""


class ScingError(Exception):
    """Base class for all package errors."""


class ShapeError(ScingError, ValueError):
    pass


class NumericError(ScingError, ArithmeticError):
    pass


class ConfigError(ScingError, ValueError):
    pass


class DataError(ScingError, OSError):
    pass


class CheckpointError(ScingError, ValueError):
    pass
