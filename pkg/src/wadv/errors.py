"""Exception types raised across the package.

Every error carries a short human-readable message naming the offending
quantity; callers that need to distinguish failure modes should catch the
specific class rather than parse messages.
"""


class WadvError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(WadvError):
    """Two arrays that must share a shape (or a grid) do not."""


class ZeroMassChannel(WadvError):
    """A channel with zero total mass cannot be normalized."""


class RangeViolation(WadvError):
    """Pixel values left the valid [0, 1] range."""


class ZeroGradient(WadvError):
    """A gradient step direction has no usable magnitude."""


class NumericalOverflow(WadvError):
    """An iteration produced non-finite dual variables."""


class InstanceTooLarge(WadvError):
    """The exact solver only accepts tiny instances."""


class BadMagic(WadvError):
    """An IDX file does not start with a recognized magic number."""


class TruncatedFile(WadvError):
    """An IDX file ends before its header-declared payload."""


class LabelImageCountMismatch(WadvError):
    """Paired IDX image/label files disagree on the record count."""


class CheckpointFormatError(WadvError):
    """A model checkpoint file is malformed or has the wrong magic."""


class NotFittedError(WadvError):
    """An estimator method requiring a fitted state was called before fit."""
