"""Domain exceptions carrying a human-readable detail and the CLI exit code."""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class DVQNError(Exception):
    """Base error. ``exit_code`` is what the CLI returns when this escapes."""

    exit_code: int = 1

    def __init__(self, detail: str, *, exit_code: int | None = None) -> None:
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class StructuralError(DVQNError, ValueError):
    """Shape or dimension mismatch, missing gradient entry, malformed record."""

    exit_code = EXIT_CONFIG


class UsageError(DVQNError):
    """An operation was called in a state that does not allow it."""

    exit_code = EXIT_CONFIG


class ConfigError(UsageError):
    """Invalid or unknown configuration."""


class InsufficientSamplesError(UsageError):
    """Replay buffer holds fewer transitions than the requested batch."""


class NumericalError(DVQNError):
    """A non-finite value appeared; ``node`` names where."""

    exit_code = EXIT_NUMERICAL

    def __init__(self, detail: str, *, node: str | None = None) -> None:
        super().__init__(detail)
        self.node = node


class DegenerateDataError(DVQNError):
    exit_code = EXIT_NUMERICAL
