"""Exception hierarchy shared by every module of the package."""


class GaitPropError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDimensionError(GaitPropError, ValueError):
    pass


class ShapeError(GaitPropError, ValueError):
    pass


class SingularMatrixError(GaitPropError, ArithmeticError):
    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NumericalError(GaitPropError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class StaleCacheError(GaitPropError):
    """A forward cache was produced by a different parameter version."""


class UndefinedAngleError(GaitPropError, ValueError):
    pass


class ParseError(GaitPropError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(GaitPropError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line


class CheckpointError(GaitPropError):
    pass
