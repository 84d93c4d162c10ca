"""Exception hierarchy shared by the library and the CLI.

Every exception carries the process exit code the harness CLI reports when
the error escapes a command.
"""

from typing import Any, Optional


class UqrouteError(Exception):
    """Base class for all uqroute errors."""

    exit_code: int = 1


class UsageError(UqrouteError):
    """Missing inputs or an invalid combination of CLI flags."""

    exit_code = 2


class InvalidInputError(UqrouteError, ValueError):
    """Input violates a documented precondition (dims, ranges, finiteness)."""

    exit_code = 3


class DatasetParseError(InvalidInputError):
    """A dataset line could not be parsed."""

    def __init__(self, path: str, line_number: int, reason: str) -> None:
        self.path = path
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class SchemaError(InvalidInputError):
    """Records disagree with their manifest."""


class DivergenceError(UqrouteError, ArithmeticError):
    """Optimization produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None) -> None:
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
            message = f"{message} ({details})"
        super().__init__(message)


class JudgeUnavailableError(UqrouteError):
    """The judge could not produce a verdict after all retries."""

    exit_code = 5

    def __init__(self, message: str, attempts: int = 0) -> None:
        self.attempts = attempts
        super().__init__(message)


class JudgeProtocolError(UqrouteError):
    """The judge replied with something that is not a valid verdict."""

    exit_code = 5


class StateError(UqrouteError, RuntimeError):
    """An operation was called on an object that is not ready for it."""


class SingularityError(UqrouteError, ArithmeticError):
    """A matrix that must be positive definite failed to factorize."""
