"""Exception hierarchy shared by every dpdlab module."""


class DpdLabError(Exception):
    """Base class for all dpdlab errors."""


class ConfigError(DpdLabError, ValueError):
    """Invalid configuration values or documents."""


class DegenerateInputError(DpdLabError, ValueError):
    """Input with zero power (or otherwise unusable) where power is required."""


class SizeError(DpdLabError, ValueError):
    """Signal too short for the requested operation."""


class ShapeError(DpdLabError, ValueError):
    """Tensor or parameter shapes do not match."""


class CacheError(DpdLabError, RuntimeError):
    """A forward cache that is stale or belongs to other parameters."""


class DivergenceError(DpdLabError, RuntimeError):
    """Non-finite loss or gradient during training.

    Attributes:
        layer: index of the offending layer, when known.
        checkpoint: last parameters known to be finite, when available.
    """

    def __init__(self, message, layer=None, checkpoint=None):
        super().__init__(message)
        self.layer = layer
        self.checkpoint = checkpoint


class ConditioningError(DpdLabError, ValueError):
    """Least-squares basis is rank deficient."""

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number


class UndefinedBaselineError(DpdLabError, ValueError):
    """Out-of-band reduction requested against a baseline with no excess power."""


class FileFormatError(DpdLabError, ValueError):
    """Binary file with wrong magic bytes or malformed header."""


class TruncatedFileError(FileFormatError):
    """File shorter than its header promises."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the payload."""
