"""Exception hierarchy.

Every error the library raises deliberately derives from MisscountError.
The CLI maps ValidationError -> exit 1 and RuntimeFailure -> exit 2;
usage problems are handled separately (exit 64).
"""

from __future__ import annotations


class MisscountError(Exception):
    """Base class for all library errors."""


class ValidationError(MisscountError):
    """Bad inputs: malformed files, non-conforming tables, invalid configs."""


class ParseError(ValidationError):
    """A file could not be parsed. Carries a line number when known."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += str(path)
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ConformanceError(ValidationError):
    """Two inputs that must describe the same layout disagree."""


class ConfigurationError(ValidationError):
    """A configuration value is out of its documented domain."""


class DomainError(ValidationError):
    """A numeric input is outside the mathematical domain of an operation."""


class ImputationError(ValidationError):
    """Missing cases cannot be allocated, e.g. a zero-population cell."""


class IdentifiabilityError(MisscountError):
    """A closed-form estimator was asked to invert a rank-deficient system.

    Attributes
    ----------
    rank : int
        The numerical rank that was found.
    required : int
        The rank that would have been needed.
    """

    def __init__(self, message: str, *, rank: int, required: int):
        super().__init__(message)
        self.rank = rank
        self.required = required


class RuntimeFailure(MisscountError):
    """A computation started from valid inputs but could not finish."""


class InitializationError(RuntimeFailure):
    """No valid sampler initialization point was found within the retry budget."""


class SamplingFailure(RuntimeFailure):
    """Every post-warmup transition of some chain diverged; the draws are unusable."""
