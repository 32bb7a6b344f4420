"""Exception hierarchy shared by the geonode modules."""


class GeonodeError(Exception):
    """Base class for all library errors."""


class ContractViolation(GeonodeError, ValueError):
    """Argument shapes or values break an operation's precondition."""


class InvalidAlgebraError(GeonodeError, ValueError):
    """A matrix handed to ``vee`` does not lie in the requested Lie algebra."""


class OutOfChartError(GeonodeError):
    """A group element lies outside (or too close to the boundary of) a chart."""


class StiffnessError(GeonodeError):
    """Adaptive step size collapsed below the minimum step."""


class NumericError(GeonodeError, FloatingPointError):
    """Non-finite values appeared during integration or differentiation."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


class RangeError(GeonodeError, ValueError):
    """Requested time lies outside an integrated trajectory."""
