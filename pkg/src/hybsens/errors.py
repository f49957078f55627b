"""Exception hierarchy shared by all solver components."""


class HybridSystemError(Exception):
    """Base class for all errors raised by this package."""


class EvaluationFailure(HybridSystemError):
    """A user-supplied evaluator raised or returned an unusable value."""


class SingularMatrix(HybridSystemError):
    """A solvability matrix is numerically rank deficient."""


class SingularIterationMatrix(SingularMatrix):
    """The Newton iteration matrix of an implicit stage could not be factorized."""


class SingularTransition(SingularMatrix):
    """The transition system matrix is numerically singular."""


class NewtonDivergence(HybridSystemError):
    """Newton iteration failed to converge after retries were exhausted."""


class NoSignChange(HybridSystemError):
    """Event location was requested on a step without a guard sign change."""


class GrazingEvent(HybridSystemError):
    """Tangential guard crossing: the drift vanishes and the transition-time
    sensitivity is undefined."""


class MaxStepsExceeded(HybridSystemError):
    """Step budget exhausted before reaching the end of the interval."""


class StepSizeUnderflow(HybridSystemError):
    """Adaptive step size was driven below the representable resolution."""


class ChatteringLimit(HybridSystemError):
    """Transition count limit reached (suspected chattering)."""


class ConsistencyError(HybridSystemError):
    """A (re)initialized state does not satisfy the full residual."""


class UnknownProblem(HybridSystemError):
    """Requested built-in problem id does not exist."""


class InvalidOverride(HybridSystemError):
    """Unsupported or malformed problem override."""


class DomainError(HybridSystemError):
    """An evaluation left the mathematical domain of a model formula
    (for example a non-positive logarithm argument in a memory update)."""


class MultipleCrossingsWarning(UserWarning):
    """More than one guard sign change was detected within a single step;
    the leftmost crossing is used."""
