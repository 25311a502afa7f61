#!/usr/bin/env python3
"""
Errors - Exception hierarchy shared by every Co-DA module, plus CLI exit codes.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_VARIANT = 5


class CodaError(Exception):
    """Root of all errors raised by this package."""


class ShapeError(CodaError, ValueError):
    pass


class NumericError(CodaError, ArithmeticError):
    pass


class TapeError(CodaError, RuntimeError):
    pass


class ConfigError(CodaError, ValueError):
    pass


class UnknownVariantError(ConfigError):
    pass


class DataError(CodaError, ValueError):
    pass


class IdxFormatError(DataError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxDtypeError(IdxFormatError):
    pass


class IdxLengthError(IdxFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"IDX payload length mismatch: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class CheckpointError(CodaError, IOError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.name = name


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the CLI exit code contract."""
    if isinstance(error, UnknownVariantError):
        return EXIT_VARIANT
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (CheckpointError, DataError, OSError)):
        return EXIT_IO
    return 1
