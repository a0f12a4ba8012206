"""Exception types shared across the package."""


class BcseError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BcseError, ValueError):
    """Invalid shape, axis, or layer geometry (mismatched extents, bad groups...)."""


class InvalidArgument(BcseError, ValueError):
    """A scalar argument, label, or configuration value is out of contract."""


class AudioFormatError(BcseError, ValueError):
    """A WAV file is malformed or has the wrong encoding/rate/channel count."""


class DatasetError(BcseError):
    """Dataset layout problems: missing folders, split conflicts, empty splits."""


class CheckpointError(BcseError):
    """A checkpoint file is corrupt, truncated, or missing expected tensors."""


class DivergenceError(BcseError):
    """Training produced a non-finite loss."""
