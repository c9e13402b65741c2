"""Shared exception types."""

from __future__ import annotations


class StreetscribeError(Exception):
    """Base class for all package errors."""


class ValidationError(StreetscribeError):
    """A value violates a documented precondition or type invariant."""


class ManifestParseError(StreetscribeError):
    """A manifest file is syntactically malformed.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class IntegrityError(StreetscribeError):
    """Referential-integrity failure; lists every violation found."""

    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnsupportedPromptError(StreetscribeError):
    """A prompt condition was requested on a backend that cannot take one."""


class BackendFailure(StreetscribeError):
    """An ASR backend failed; carries the backend's own message."""


class TransientBackendError(BackendFailure):
    """Retryable backend failure (rate limit, timeout, transient transport)."""


class GeocoderTransportError(StreetscribeError):
    """The geocoder could not be reached; distinct from an UNRESOLVED query."""


class RouterError(StreetscribeError):
    """The routing backend failed for a point pair."""


class AlignmentMiss(StreetscribeError):
    """The injected entity's words were not found in the word alignment."""


class SegmentOutOfBounds(StreetscribeError):
    """An extracted clip falls outside the configured duration bounds."""


class StateTransitionError(StreetscribeError):
    """A synthesis sample was moved along a forbidden status edge."""


class SampleNotFound(StreetscribeError):
    """A decision referenced a sample id the store has never seen."""


class LogParseError(StreetscribeError):
    """An append-only log has a corrupt line; carries its line number."""

    def __init__(self, message: str, line_no: int) -> None:
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class ConfigError(StreetscribeError):
    """Run configuration is invalid; carries the full list of problems."""

    def __init__(self, problems: list[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
