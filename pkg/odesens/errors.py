"""Exception hierarchy shared by the odesens modules."""


class OdesensError(Exception):
    """Base class for every error raised by odesens."""


class DimensionError(OdesensError, ValueError):
    """Raised when array shapes, lengths or grids do not line up."""


class RangeError(OdesensError, ValueError):
    """Raised when a time lies outside the interval a trajectory covers."""


class ValidationError(OdesensError, ValueError):
    """Raised for inputs violating a stated precondition.

    Negative envelopes, asymmetric weight matrices and similar.
    """


class DefinitenessError(ValidationError):
    """Raised when a weight matrix is not symmetric positive definite."""


class CapabilityError(OdesensError):
    """Raised when a model lacks a derivative an operation needs."""


class ConfigError(OdesensError, ValueError):
    """Raised for an unreadable or inconsistent configuration."""


class IntegrationError(OdesensError):
    """Raised when time integration cannot proceed.

    `time` is the time at which the failure was detected.
    """

    def __init__(self, message: str, time: float | None = None):
        """Initialize with a message and the offending time."""
        super().__init__(message if time is None else f"{message} (t = {time:.17g})")
        self.time = time


class StiffnessError(IntegrationError):
    """Raised when the adaptive step size underflows.

    This is the usual symptom of a stiff problem, which the explicit
    integrators here are not meant for.
    """


class EvaluationError(OdesensError):
    """Raised when a model evaluator returns non-finite values.

    `where` names the evaluator, `time` the evaluation time.
    """

    def __init__(self, where: str, time: float, detail: str = ""):
        """Initialize with evaluator name, time and optional detail."""
        message = f"non-finite output from {where} at t = {time:.17g}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.where = where
        self.time = time


class StageError(OdesensError):
    """Raised by the experiment drivers when one pipeline stage fails.

    The original exception is chained; `stage` names the failing stage.
    """

    def __init__(self, stage: str, cause: BaseException):
        """Wrap `cause` as a failure of `stage`."""
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
