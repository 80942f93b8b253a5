"""Exception hierarchy shared across the package.

Exit-code policy for the CLI: configuration problems map to 2, file and
parsing problems to 3, numeric/domain failures to 4.
"""

from __future__ import annotations


class DropforestError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DropforestError):
    """Invalid configuration value or unparseable config file."""


class ParseError(DropforestError):
    """Malformed input file.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += f" [{path}"
            loc += f":{line}]" if line is not None else "]"
        elif line is not None:
            loc += f" [line {line}]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class DimensionError(ParseError):
    """Ragged rows or inconsistent dimensions in a matrix file."""


class ShapeMismatchError(DropforestError):
    """Two objects that must share a shape do not."""


class MaskShapeError(ShapeMismatchError):
    """Imputation mask does not match the matrix it applies to."""


class DegenerateCellError(DropforestError):
    """A cell has zero total count and cannot be library-size scaled."""


class MissingFitError(DropforestError):
    """A gene/stratum slice with zeros has no fitted dropout model."""


class InsufficientDataError(DropforestError):
    """Too few observations for the requested fit or test."""


class UnreachableTargetError(DropforestError):
    """Requested sparsity target lies below the intrinsic zero fraction."""


class LengthMismatchError(DropforestError):
    """Two label vectors of unequal length were compared."""


class EmptyGroupError(DropforestError):
    """A summary was requested for a group with no members."""


class KTooLargeError(DropforestError):
    """More clusters requested than there are items."""


class ComponentCountError(DropforestError):
    """More principal components requested than the data supports."""
