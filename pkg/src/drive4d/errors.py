"""Exception types shared across the package."""

from __future__ import annotations


class Drive4dError(Exception):
    """Base class for all package-specific errors."""


class OutOfBoundsError(Drive4dError):
    """A world point or grid index falls outside the grid volume."""


class ParseError(Drive4dError):
    """Malformed textual input.

    `offset` is the byte offset of the first offending character when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class FormatError(Drive4dError):
    """Binary container violates the on-disk format (magic, version, shape)."""


class ShapeError(Drive4dError):
    """Array shape incompatible with the configured dimensions."""


class LengthError(Drive4dError):
    """Sequence length outside the supported range."""


class SpecMismatchError(Drive4dError):
    """Two grids that must share a GridSpec do not."""


class ConfigError(Drive4dError):
    """Invalid or inconsistent run configuration."""


class VersionError(Drive4dError):
    """Persisted artifact written by an incompatible format version."""
