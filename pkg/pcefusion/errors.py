"""Exceptions raised by pcefusion."""


class PCEFusionError(Exception):
    """The base of all pcefusion errors."""


class DimensionError(PCEFusionError):
    """Raised when tensor shapes or parameter widths disagree."""


class DomainError(PCEFusionError):
    """Raised when an argument falls outside the domain of an operation (e.g., log of a nonpositive value)."""


class DegenerateMaskError(PCEFusionError):
    """Raised when a mask leaves no valid entry along a reduced axis."""


class ContractError(PCEFusionError):
    """Raised when a caller breaks the documented contract of an operation."""


class ParseError(PCEFusionError):
    """Raised when structure text cannot be parsed.

    Attributes:
        line (int): The 1-based line number of the offending line, or 0 if unknown.
    """

    def __init__(self, message: str, line: int = 0):
        self.line: int = line
        super().__init__(f"line {line}: {message}" if line else message)


class GeometryError(PCEFusionError):
    """Raised when a crystal structure is geometrically invalid."""


class ConfigError(PCEFusionError):
    """Raised when a run configuration is malformed. Maps to exit code 2."""

    exit_code = 2


class DataError(PCEFusionError):
    """Raised when input data cannot be loaded or resolved. Maps to exit code 3."""

    exit_code = 3


class NumericError(PCEFusionError):
    """Raised when training diverges (e.g., a NaN loss). Maps to exit code 4."""

    exit_code = 4
