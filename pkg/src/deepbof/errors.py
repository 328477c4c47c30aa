"""Exception hierarchy shared across the pipeline.

Every failure the library raises on purpose derives from :class:`DeepBofError`
so the CLI can report it with stage context and a nonzero exit code.
"""


class DeepBofError(Exception):
    """Base class for all pipeline errors."""


class InvalidLandmarksError(DeepBofError):
    """Eye landmarks outside the image bounds or otherwise unusable."""


class DegenerateLandmarksError(InvalidLandmarksError):
    """Coincident or vertically stacked eyes; no rotation is defined."""


class DimensionMismatchError(DeepBofError):
    """An array does not have the dimensions an operation requires."""


class BadMagicError(DeepBofError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFileError(DeepBofError):
    """A binary file ends before its declared payload is complete."""


class PayloadMismatchError(DeepBofError):
    """Declared dimensions disagree with the payload actually present."""


class NonFiniteValueError(DeepBofError):
    """A tensor holds NaN or infinity where finite values are required."""


class ManifestError(DeepBofError):
    """A dataset manifest is malformed; the message names the line."""


class DivergenceError(DeepBofError):
    """Training produced a non-finite loss; the message names the epoch."""
