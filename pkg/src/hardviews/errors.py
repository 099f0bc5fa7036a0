"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so raising the right class
matters: ConfigError -> 2, DataFormatError -> 3, NumericError -> 4.
"""


class HardviewsError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HardviewsError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class ContractError(HardviewsError):
    """A documented precondition of an operation was violated."""


class ConfigError(HardviewsError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(HardviewsError):
    """Malformed dataset or checkpoint payload."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericError(HardviewsError):
    """Non-finite values where finite ones are required."""
