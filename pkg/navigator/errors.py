"""Exception hierarchy for the navigator core.

Every failure a caller is expected to handle derives from NavigatorError so
entry points (CLI, HTTP routers) can catch one type and report the subclass name.
"""

from typing import List, Optional


class NavigatorError(Exception):
    """Base class for all domain failures."""


# tasks
class SplitOverlap(NavigatorError):
    pass


class MissingClass(NavigatorError):
    pass


class InsufficientExamples(NavigatorError):
    pass


class InsufficientClasses(NavigatorError):
    pass


class MissingTargetDomain(NavigatorError):
    pass


# numerics
class ShapeError(NavigatorError):
    pass


class NumericError(NavigatorError):
    pass


class DegenerateVector(NavigatorError):
    pass


class TrainingDiverged(NavigatorError):
    def __init__(self, message: str, history: Optional[list] = None):
        super().__init__(message)
        self.history = history or []


class AdaptationDiverged(NavigatorError):
    pass


class StateMismatch(NavigatorError):
    pass


# decoding / evaluation
class AlreadyDecoded(NavigatorError):
    pass


class UnknownPreset(NavigatorError):
    pass


class UnsupportedInput(NavigatorError):
    pass


# artifacts
class NothingToReport(NavigatorError):
    pass


class MixedConfigHashes(NavigatorError):
    pass


class CheckpointError(NavigatorError):
    pass


class MissingArtifact(NavigatorError):
    """A run directory or one of its files does not exist."""


class ConfigError(NavigatorError):
    """Configuration failed validation; diagnostics are "<file>:<line>: <loc>: <msg>" strings."""

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = diagnostics or []
        detail = "\n".join(self.diagnostics)
        super().__init__(f"{message}\n{detail}" if detail else message)
