"""Exception hierarchy shared by every notamkit module."""

from __future__ import annotations


class NotamkitError(Exception):
    """Base class for all notamkit failures."""


class EmptyInput(NotamkitError, ValueError):
    pass


class MalformedQCode(NotamkitError, ValueError):
    pass


class IoError(NotamkitError, OSError):
    pass


class CorpusEmpty(NotamkitError, ValueError):
    pass


class MissingEvidence(NotamkitError, ValueError):
    pass


class SchemaMismatch(NotamkitError, ValueError):
    pass


class InsufficientExamples(NotamkitError, ValueError):
    pass


class NoJsonFound(NotamkitError, ValueError):
    pass


class InvalidJson(NotamkitError, ValueError):
    pass


class EmptySamples(NotamkitError, ValueError):
    pass


class KeyCollision(NotamkitError, ValueError):
    pass


class GatewayError(NotamkitError):
    """Raised by LLM backends."""


class BackendUnavailable(GatewayError):
    pass


class ReplayMiss(GatewayError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument
        return Exception.__str__(self)


class ScriptMiss(GatewayError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class MalformedAgentOutput(NotamkitError, ValueError):
    pass


class UnknownFieldReference(NotamkitError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class StageError(NotamkitError):
    """A pipeline stage failed; carries the stage name and partial state."""

    def __init__(self, stage: str, cause: Exception, partial=None):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial


def describe(exc: BaseException) -> str:
    """One-line ``Type: message`` rendering used in annotations and CLI output."""
    if isinstance(exc, StageError):
        return f"{type(exc.cause).__name__} ({exc})"
    return f"{type(exc).__name__}: {exc}"
