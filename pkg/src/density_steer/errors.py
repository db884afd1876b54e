"""Exception types shared across the solver modules."""


class DensitySteerError(Exception):
    """Base class for all library errors."""


class NonFiniteEvaluation(DensitySteerError):
    """A user-supplied map returned NaN or infinity at a probe point."""


class SchemeDiverged(DensitySteerError):
    """A marching scheme produced non-finite or absurdly large values."""


class MassDeficit(DensitySteerError):
    """Initial density is not adequately representable on the grid."""


class AllMasked(DensitySteerError):
    """No valid node remains after applying the score validity mask."""


class TooFewParticles(DensitySteerError):
    """Not enough alive particles for a kernel density estimate."""


class NotMonotone(DensitySteerError):
    """State map is not strictly monotone on the requested grid."""


class EmptyControlGrid(DensitySteerError):
    """Control minimization was asked to search an empty grid."""


class PsorStalled(DensitySteerError):
    """Projected SOR failed to reach tolerance within the iteration cap."""


class EmptyInput(DensitySteerError):
    """An estimator received an empty sample or zero-mass density."""


class RootNotBracketed(DensitySteerError):
    """Root finding interval does not bracket a sign change."""


class NotConverged(DensitySteerError):
    """Iterative sweep hit the iteration cap before meeting tolerance.

    Carries the final state so callers can inspect diagnostics.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ParseError(DensitySteerError):
    """Config file could not be parsed; carries line/column context."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {column}" if column is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.column = column


class ValidationError(DensitySteerError):
    """Config value failed validation; carries the offending field."""

    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason
