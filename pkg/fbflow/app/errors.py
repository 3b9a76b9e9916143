from __future__ import annotations


class FBFlowError(Exception):
    """Базовое исключение fbflow."""


class InvalidInput(FBFlowError, ValueError):
    """Arguments that violate an operation's preconditions."""


class StepRangeError(InvalidInput):
    def __init__(self, message: str, index: int | None = None, required_m: int | None = None) -> None:
        super().__init__(message)
        self.index = index
        self.required_m = required_m


class DomainError(InvalidInput):
    """A point outside the domain of the set-valued operator."""


class MembershipError(InvalidInput):
    """A pair (x, y) with y not in (A+B)x."""


class ScheduleClassError(InvalidInput):
    """The step schedule is not in the summability class an operation needs."""


class BudgetExceeded(FBFlowError):
    def __init__(self, message: str, required: int | None = None) -> None:
        super().__init__(message)
        self.required = required


class ConfigError(FBFlowError):
    """Конфигурацию эксперимента не удалось прочитать или разрешить."""
