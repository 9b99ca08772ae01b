"""Exception hierarchy shared by every module of the package."""


class ABLassoError(Exception):
    """Base class for all package errors."""


class PanelError(ABLassoError, ValueError):
    """Malformed panel input."""


class DuplicateCell(PanelError):
    """The same (unit, time) pair appears more than once."""


class UnbalancedPanel(PanelError):
    """Some unit is missing periods, or the periods are not contiguous."""


class BadValue(PanelError):
    """A non-finite value was found in the data."""


class ShapeError(ABLassoError, ValueError):
    """Array dimensions do not agree."""


class BadParameter(ABLassoError, ValueError):
    """A tuning or configuration parameter is outside its domain."""


class BadPlan(BadParameter):
    """A cross-fitting plan cannot be realised for the given panel."""


class ConvergenceError(ABLassoError, RuntimeError):
    """An iterative solver hit its iteration cap.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SingularDesign(ABLassoError, ArithmeticError):
    """A cross-moment matrix is singular (or numerically so)."""


class UnitRootError(ABLassoError, ArithmeticError):
    """The autoregressive coefficients sum to one; the long-run effect is undefined."""


class Infeasible(ABLassoError, RuntimeError):
    """A Dantzig-selector column problem has an empty feasible set."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class InternalError(ABLassoError, RuntimeError):
    """Something that should be impossible happened."""


class FirstStageError(ABLassoError, RuntimeError):
    """A first-stage fit failed; carries the period and regressor that failed."""

    def __init__(self, message, period=None, regressor=None):
        super().__init__(message)
        self.period = period
        self.regressor = regressor
