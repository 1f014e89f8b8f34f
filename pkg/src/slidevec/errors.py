"""Exception hierarchy shared across the pipeline.

``exit_code`` is what the CLI returns when the error escapes a command:
1 usage/IO, 2 data quality, 3 numeric failure.
"""


class SlidevecError(Exception):
    exit_code = 1


class DataQualityError(SlidevecError):
    exit_code = 2


class NumericError(SlidevecError):
    exit_code = 3


class EmptySlideError(DataQualityError):
    """Every patch of a slide was filtered out; no bag can be built."""


class FvecFormatError(SlidevecError):
    """Malformed FVEC1 container."""


class BadMagicError(FvecFormatError):
    pass


class TruncatedPayloadError(FvecFormatError):
    pass


class NonFiniteError(SlidevecError):
    """NaN or infinity where finite floats are required."""


class DimMismatchError(SlidevecError):
    """Feature dimension or row count disagrees with the sidecar manifest."""


class MixedDimError(SlidevecError):
    """Slides in one cohort carry different feature dimensions."""


class MissingLabelError(DataQualityError):
    pass


class EmptyCohortError(DataQualityError):
    pass


class KTooLargeError(DataQualityError):
    """Requested more clusters than there are points."""


class TrainingDivergedError(NumericError):
    """Loss became non-finite during optimization."""


class LloydMonotonicityError(NumericError):
    """A k-means iteration increased WCSS beyond numerical noise (indicates a bug)."""


class UnsupportedClassifierError(SlidevecError):
    """Operation requires an attention classifier (e.g. attention export from an MLP)."""
