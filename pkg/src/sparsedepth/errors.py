"""Exception types shared across the package."""


class SparseDepthError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(SparseDepthError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class NoValidPixelsError(SparseDepthError, ValueError):
    """An operation that averages over valid pixels received none."""


class NonPositiveDepthError(SparseDepthError, ValueError):
    """A depth/disparity reference value was <= 0 where a positive value is required."""


class PgmFormatError(SparseDepthError, ValueError):
    """A PGM file is malformed (bad magic, wrong maxval, or truncated payload)."""


class CheckpointFormatError(SparseDepthError, ValueError):
    """A model checkpoint is malformed or inconsistent with its shape table."""
