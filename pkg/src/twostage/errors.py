"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or malformed dimensions."""


class ParameterError(ValueError):
    """A configuration value or argument is outside its allowed range."""


class ValidationError(ValueError):
    """A data structure violates one of its invariants."""


class FileFormatError(ValueError):
    """Base class for persistence-format failures."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FileFormatError):
    """File declares a format version this reader does not understand."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload is complete."""


class CountMismatchError(FileFormatError):
    """Payload size disagrees with the declared record count."""


class TrainingError(RuntimeError):
    """Training failed (e.g. the loss became non-finite)."""


class MeasurementError(RuntimeError):
    """A benchmark produced unusable timing samples."""
