"""
Exception hierarchy for the calipred library.

Validation failures subclass ``ValueError`` so that code written against
plain ``ValueError`` keeps working; runtime failures subclass ``RuntimeError``.
"""

from typing import Any, Dict, Optional


class CalipredError(Exception):
    """Root of every error raised by calipred."""


class DataError(CalipredError, ValueError):
    """
    Malformed or non-finite input data.

    Attributes:
        row: 1-based line number in the source file, if known.
        column: Offending column name, if known.
    """

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[str] = None
    ) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class ContractError(CalipredError, ValueError):
    """A precondition of an operation was violated."""


class SceneError(CalipredError, ValueError):
    """The scene is not a valid highway scene (e.g. ego off-road)."""


class CoverageError(CalipredError, ValueError):
    """An observed trajectory is farther than epsilon from every base."""


class InfeasibleError(CalipredError, ValueError):
    """A calibration target cannot be met with the available data."""


class ConfigError(CalipredError, ValueError):
    """Invalid or inconsistent configuration, or a fingerprint mismatch."""


class ArtifactError(CalipredError, ValueError):
    """A required upstream artifact is missing or unreadable."""


class TrainingError(CalipredError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int) -> None:
        super().__init__(message)
        self.epoch = epoch


class SolverError(CalipredError, RuntimeError):
    """The planner could not produce a finite plan."""

    def __init__(
        self, message: str, diagnostics: Optional[Dict[str, Any]] = None
    ) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}
