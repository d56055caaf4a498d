"""Exception types shared across the package."""

from __future__ import annotations


class ParameterError(ValueError):
    """A caller supplied an argument outside the operation's domain."""


class DegenerateInputError(ValueError):
    """The input admits no well-defined answer (zero mass, zero norm, ...)."""


class ClipFormatError(ValueError):
    """A clip directory does not follow the on-disk layout.

    ``frame`` names the offending frame index when the problem is local to one
    frame.
    """

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame


class SkippedSamplesError(RuntimeError):
    """Too many samples failed during evaluation."""

    def __init__(self, skipped: int, total: int):
        super().__init__(f"{skipped} of {total} samples skipped (limit 1%)")
        self.skipped = skipped
        self.total = total


class ConfigError(ValueError):
    """A run configuration is malformed or references an unknown key."""


class DataError(RuntimeError):
    """Required data or a prerequisite artifact is missing or unusable."""
