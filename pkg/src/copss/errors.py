"""Exception types shared across the package."""


class CopssError(Exception):
    """Base class for package-specific failures."""


class QuadratureError(CopssError):
    """An adaptive quadrature did not reach the requested tolerance.

    Carries the achieved absolute-error estimate so callers can decide
    whether the partial result is still usable.
    """

    def __init__(self, message: str, achieved_tolerance: float) -> None:
        super().__init__(f"{message} (achieved tolerance {achieved_tolerance:.3e})")
        self.achieved_tolerance = achieved_tolerance


class InfeasibleError(CopssError):
    """Rate targets cannot be met anywhere in the admissible band split."""


class NonConcaveError(CopssError):
    """A utility that must be concave is not; carries the sampled profile."""

    def __init__(self, message: str, samples) -> None:
        super().__init__(message)
        self.samples = list(samples)


class ConditionViolatedError(CopssError):
    """A convergence/uniqueness precondition does not hold."""


class StructureError(CopssError):
    """A matrix does not have the structure an operation requires."""


class BargainingInfeasibleError(CopssError):
    """No point improves every player over its disagreement utility."""


class ScenarioFormatError(CopssError):
    """A scenario file is malformed; message names the offending field."""
