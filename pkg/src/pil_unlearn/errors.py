"""Exception hierarchy shared by every module."""


class PilError(Exception):
    """Base class for domain errors raised by this package."""


class ShapeError(PilError, ValueError):
    pass


class ArgumentError(PilError, ValueError):
    pass


class FormatError(PilError, ValueError):
    pass


class IntegrityError(PilError, ValueError):
    pass


class ConsistencyError(PilError, ValueError):
    pass


class NumericError(PilError, ArithmeticError):
    pass


class UndefinedCosineError(NumericError):
    """Cosine requested for a zero-norm vector."""
