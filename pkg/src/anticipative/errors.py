"""Exception hierarchy.

Two families matter to callers: :class:`ModelError` (the model or input is
invalid, CLI exit code 2) and :class:`NumericalError` (a computation failed on
a valid model, CLI exit code 3).
"""


class AnticipativeError(Exception):
    """Base class for every error raised by this package."""


class ModelError(AnticipativeError, ValueError):
    """Invalid model, configuration or input data."""


class NumericalError(AnticipativeError, ArithmeticError):
    """A numerical procedure failed or produced an unusable result."""


class QuadratureDomain(ModelError):
    pass


class DomainOrder(ModelError):
    pass


class GridMismatch(ModelError):
    pass


class NotPSD(ModelError):
    pass


class ResidualCovNotPSD(ModelError):
    pass


class NotDetectable(ModelError):
    pass


class NotStabilizable(ModelError):
    pass


class GramSingular(NumericalError):
    """The Gram matrix became numerically singular before the support endpoint.

    This means the initial condition is (numerically) measurable with respect
    to the observation noise, and the drift transform does not exist.
    """

    def __init__(self, t, cond):
        self.t = float(t)
        self.cond = float(cond)
        super().__init__(f"Gram matrix singular at t={self.t:.6g} (condition number {self.cond:.3e})")


class RiccatiBlowup(NumericalError):
    pass


class PSDViolation(NumericalError):
    pass


class SingularConditioning(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NonPositiveMargin(NumericalError):
    pass


class WindowTooShort(ModelError):
    pass


class DifferenceBelowFloor(NumericalError):
    """The covariance already sits on its limit; no decay rate is identifiable."""


class AllWeightsZero(NumericalError):
    pass


class DivisionByZero(NumericalError):
    pass
