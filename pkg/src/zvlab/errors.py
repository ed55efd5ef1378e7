"""Exception types shared across the library."""


class ZvlabError(Exception):
    """Base class for all zvlab errors."""


class DomainError(ZvlabError):
    """A parameter violates an admissibility or positivity constraint."""


class EvaluationError(ZvlabError):
    """A field or scheme produced a non-finite value; message carries the offending point."""


class SizingError(ZvlabError):
    """A requested allocation exceeds the configured memory budget."""


class CalibrationError(ZvlabError):
    """The reaction-rate search failed to reach its target gradient bound."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = tuple(trace)


class InversionError(ZvlabError):
    """Fixed-point inversion of the coordinate change did not converge."""


class ExtrapolationError(ZvlabError):
    """A query point lies outside the grid box."""


class DegeneracyError(ZvlabError):
    """A diffusion coefficient fell below its allowed minimum."""


class ValidationError(ZvlabError):
    """An input object violates one of its declared invariants."""


class EstimationError(ZvlabError):
    """A Monte Carlo estimate could not be formed (e.g. every path excluded)."""


class UsageError(ZvlabError):
    """Bad command-line or experiment configuration."""
