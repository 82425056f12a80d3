"""Exception hierarchy shared across the package.

Every error raised by slimvec derives from SlimvecError so callers (the CLI
and the HTTP service) can map failures onto stable exit codes / status codes:
usage errors -> 2, data/format errors -> 3, provider errors -> 4.
"""

from __future__ import annotations


class SlimvecError(Exception):
    """Base class for all slimvec errors."""

    code = "internal"


class InvalidArgumentError(SlimvecError, ValueError):
    """Caller passed an argument that violates a documented precondition."""

    code = "usage"


class FormatError(SlimvecError):
    """A persisted artifact is corrupt or truncated.

    Args:
        section: Name of the file section that failed to parse.
        message: Human-readable detail.
    """

    code = "data"

    def __init__(self, section: str, message: str) -> None:
        super().__init__(f"{section}: {message}")
        self.section = section


class BuildError(SlimvecError):
    """Index construction failed."""

    code = "data"


class BudgetInfeasibleError(BuildError):
    """The requested byte budget cannot be met; carries the achievable floor."""

    def __init__(self, message: str, min_achievable_bytes: int) -> None:
        super().__init__(message)
        self.min_achievable_bytes = min_achievable_bytes


class ProviderError(SlimvecError):
    """The embedding provider failed (transport or internal error).

    Attributes:
        retries: Number of attempts made before giving up.
    """

    code = "provider"

    def __init__(self, message: str, retries: int = 0) -> None:
        super().__init__(message)
        self.retries = retries


class ProtocolError(ProviderError):
    """The external provider replied with a malformed or mismatched payload."""


class ProviderMismatchError(SlimvecError):
    """Index was built with a different embedding configuration."""

    code = "usage"


class IndexLockedError(SlimvecError):
    """Another process holds the index directory lock."""

    code = "data"


class SearchError(SlimvecError):
    """A query failed mid-flight; carries the partial report when available.

    Attributes:
        partial_report: Whatever counters were collected before the failure.
    """

    code = "provider"

    def __init__(self, message: str, partial_report=None) -> None:
        super().__init__(message)
        self.partial_report = partial_report
