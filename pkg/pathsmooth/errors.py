from typing import Optional


class PathSmoothError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(PathSmoothError):
    """Invalid parameters, config keys or model/kernel combinations."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class FilterCollapseError(PathSmoothError):
    """All particle weights vanished at time t."""

    def __init__(self, t: int):
        self.t = t
        super().__init__(f"filter collapse: every weight is zero at t={t}")


class GridCoverageError(PathSmoothError):
    """The quadrature grid carries no mass (or leaks mass) at time t."""

    def __init__(self, t: Optional[int], detail: str = "zero total mass on grid"):
        self.t = t
        where = f" at t={t}" if t is not None else ""
        super().__init__(f"grid coverage{where}: {detail}")


class ContractError(PathSmoothError):
    """A caller-supplied bound or a precondition did not hold at runtime."""


class EnvelopeViolationError(ContractError):
    """A rejection-sampling acceptance probability exceeded one."""


class RejectionCapError(ContractError):
    """A rejection loop hit its safety cap."""


class InsufficientSampleError(PathSmoothError):
    pass


class NumericalError(PathSmoothError):
    """A recursion produced a non-positive variance or a non-finite value."""


class RepetitionError(PathSmoothError):
    """Wraps an algorithm error with the repetition that raised it."""

    def __init__(self, repetition: int, cause: Exception):
        self.repetition = repetition
        self.cause = cause
        super().__init__(f"repetition {repetition}: {cause}")
