"""Exception types shared across the package."""


class NsfError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(NsfError, ValueError):
    """A parameter value is outside its domain."""


class ShapeError(NsfError, ValueError):
    """Array arguments have inconsistent shapes or dimensions."""


class SingularMatrixError(NsfError):
    """Cholesky factorization failed even at the maximum jitter level."""


class DegenerateDataError(NsfError, ValueError):
    """Input data is degenerate for the requested operation."""


class DegenerateComponentError(NsfError, ValueError):
    """Every component of a factorization is degenerate."""


class UnsupportedModelError(NsfError):
    """The requested operation is not defined for this model family."""


class DivergedFitError(NsfError, RuntimeError):
    """Optimization produced a non-finite objective or gradient."""


class ParseError(NsfError, ValueError):
    """A data file could not be parsed."""
