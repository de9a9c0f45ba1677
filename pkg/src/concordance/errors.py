"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`ConcordanceError`.
The three intermediate classes map onto CLI exit codes.
"""

from __future__ import annotations


class ConcordanceError(Exception):
    exit_code = 1


class ConfigError(ConcordanceError, ValueError):
    """Invalid parameters or configuration (exit code 2)."""

    exit_code = 2


class DataError(ConcordanceError):
    """Malformed or inconsistent input data (exit code 3)."""

    exit_code = 3


class NumericError(ConcordanceError, ArithmeticError):
    """Numerical failure during computation (exit code 4)."""

    exit_code = 4


# seqcloud
class MissingPose(DataError):
    pass


class DegeneratePose(DataError):
    pass


class RangeExceedsSequence(ConfigError):
    pass


class TruncatedFile(DataError):
    pass


class LabelCountMismatch(DataError):
    pass


class BoundaryFrame(DataError):
    pass


class MalformedFile(DataError):
    pass


# stindex
class UnalignedSequence(DataError):
    pass


class RangeExceedsIndex(ConfigError):
    pass


# featnet
class EmptyNeighborhood(DataError):
    pass


class RangeMismatch(ConfigError):
    pass


class ConfidenceOutOfRange(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


# concord / detfuse
class EmptyTeacherSet(DataError):
    pass


class LengthMismatch(DataError):
    pass


class PointCountMismatch(DataError):
    pass


class DuplicateSequence(DataError):
    pass


class DegenerateBox(DataError):
    pass


# evalkit
class EmptyMatrix(DataError):
    pass


class SchemaMismatch(DataError):
    pass


# synthlab
class MissingGroundTruth(DataError):
    pass


# pipeline
class StaleInput(DataError):
    pass
