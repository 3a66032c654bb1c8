"""Exception hierarchy shared by every module."""


class OccurfError(Exception):
    """Base class for all library errors."""


class EmptyInput(OccurfError, ValueError):
    pass


class BadArgument(OccurfError, ValueError):
    pass


class NotWatertight(OccurfError, ValueError):
    pass


class ShapeError(OccurfError, ValueError):
    pass


class NumericError(OccurfError, FloatingPointError):
    pass


class TooSparse(OccurfError, ValueError):
    pass


class EmptySurface(OccurfError, RuntimeError):
    """Raised when no grid cell straddles the 0.5 level."""
