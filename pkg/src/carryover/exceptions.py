class CarryoverError(Exception):
    pass


class DomainViolation(CarryoverError):
    pass


class SystemInvalid(DomainViolation):
    def __init__(self, violations: list[str]) -> None:
        super().__init__("; ".join(violations) or "invalid system")
        self.violations = violations


class CycleError(DomainViolation):
    pass


class CurveDomainError(DomainViolation):
    pass


class ForecastInvalid(DomainViolation):
    pass


class BigMError(DomainViolation):
    pass


class InfeasibleProblem(DomainViolation):
    def __init__(self, message: str, tags: list[str] | None = None) -> None:
        if tags:
            message = f"{message} (rows: {', '.join(tags)})"
        super().__init__(message)
        self.tags = tags or []


class InputError(CarryoverError):
    pass


class NumericError(CarryoverError):
    pass


class QuantileNotConverged(NumericError):
    pass


class ResourceLimitError(NumericError):
    pass


class UsageError(CarryoverError):
    pass


class SimulationError(CarryoverError):
    def __init__(self, cycle: int, cause: Exception) -> None:
        super().__init__(f"Cycle {cycle} failed: {cause}")
        self.cycle = cycle
        self.cause = cause
