"""Exception hierarchy shared by every module."""


class LabelflowError(Exception):
    """Base class for all library errors."""


class ContractViolation(LabelflowError, ValueError):
    """An input broke a documented precondition (shape, range, emptiness)."""


class InvalidLabelError(ContractViolation):
    """A vector that should be a probability distribution is not one."""


class SimplexViolation(LabelflowError):
    """An explicit label update left the simplex."""

    def __init__(self, message, agent=None, step=None):
        super().__init__(message)
        self.agent = agent
        self.step = step


class InvalidRateMatrix(ContractViolation):
    """Off-diagonal rates are negative or columns do not sum to zero."""


class NotReversibleError(ContractViolation):
    """Detailed balance fails for the stationary distribution."""


class NonUniqueStationaryError(ContractViolation):
    """The rate matrix is reducible, so the stationary law is not unique."""


class NearSingularMetricError(LabelflowError):
    """The metric tensor was requested too close to the simplex boundary."""


class GeodesicFailure(LabelflowError):
    """The path optimizer could not keep its nodes inside the simplex."""


class SchemeAbort(LabelflowError):
    """A time-stepping run stopped early.

    Attributes
    ----------
    step : int or None
        Index of the step that failed.
    reason : str
        Short machine-friendly tag (``"guard"``, ``"simplex"``, ``"prox"``,
        ``"radius"``).
    """

    def __init__(self, message, step=None, reason="abort"):
        super().__init__(message)
        self.step = step
        self.reason = reason


class ProxNonConvergence(SchemeAbort):
    """A proximal sub-problem did not converge inside a run."""

    def __init__(self, message, step=None, agent=None):
        super().__init__(message, step=step, reason="prox")
        self.agent = agent


class ScenarioError(ContractViolation):
    """A scenario file failed to parse or validate."""
