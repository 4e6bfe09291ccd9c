"""Exception hierarchy shared by all modules."""


class GMAError(Exception):
    """Base class for every error raised by the package."""


class DataError(GMAError, ValueError):
    """Malformed or insufficient input data."""


class NumericalError(GMAError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class NonStationaryError(NumericalError):
    """The transition matrices do not define a stationary MAR process."""


class RankDeficiencyError(NumericalError):
    """A regression design is not of full column rank."""


class ConvergenceError(NumericalError):
    """An iterative solver failed to converge."""


class MonotonicityError(NumericalError):
    """Block coordinate ascent decreased the objective (an update bug)."""
