"""Exception hierarchy shared across the package."""


class BlindHarmonyError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BlindHarmonyError, ValueError):
    """Input is non-finite, mis-shaped or otherwise unusable."""


class DimensionError(InvalidInputError):
    pass


class DegenerateInputError(InvalidInputError):
    """Zero-variance data where a normalization needs spread."""


class ConfigError(BlindHarmonyError, ValueError):
    pass


class NumericalError(BlindHarmonyError, ArithmeticError):
    """A computation produced non-finite values.

    ``step`` and ``where`` locate the first failure when known.
    """

    def __init__(self, message, step=None, where=None):
        super().__init__(message)
        self.step = step
        self.where = where


class FileFormatError(BlindHarmonyError, ValueError):
    pass


class TruncatedFileError(FileFormatError):
    def __init__(self, offset, path=None):
        where = f" in {path}" if path is not None else ""
        super().__init__(f"unexpected end of file at byte {offset}{where}")
        self.offset = offset


class ChecksumError(FileFormatError):
    pass


class VersionError(FileFormatError):
    pass


class DataError(BlindHarmonyError):
    """Dataset-level problems: empty directories, conflicting dimensions."""
