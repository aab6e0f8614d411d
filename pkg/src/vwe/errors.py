"""Exception hierarchy shared by all modules."""


class VWEError(Exception):
    """Base class for errors raised by this package."""


class DomainError(VWEError, ValueError):
    """An argument lies outside the domain of an operation."""


class FormatError(VWEError, ValueError):
    """A file could not be parsed."""


class InsufficientDataError(VWEError):
    """Too few events to build a meaningful density field."""


class DegenerateHeadingError(DomainError):
    """Spline velocity vanishes, so the tangential heading is undefined."""


class FitError(VWEError):
    """A least-squares spline fit is rank deficient."""


class NumericalError(VWEError, ArithmeticError):
    """An objective returned a non-finite value."""
