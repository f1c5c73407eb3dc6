"""Exception types raised across the pipeline.

Every error carries the process exit code the CLI maps it to.
"""


class RepeatError(Exception):
    exit_code = 2


class MalformedHeader(RepeatError):
    pass


class UnsupportedDatatype(RepeatError):
    pass


class IoFailure(RepeatError):
    pass


class MalformedField(RepeatError):
    pass


class InvalidSpacing(RepeatError):
    pass


class InvalidWindow(RepeatError):
    pass


class GeometryMismatch(RepeatError):
    pass


class NotAMask(RepeatError):
    pass


class DegenerateVolume(RepeatError):
    pass


class EmptyOverlap(RepeatError):
    pass


class OutsideSupport(RepeatError):
    pass


class NonFiniteCost(RepeatError):
    exit_code = 4


class EmptyMask(RepeatError):
    pass


class EmptyRegion(RepeatError):
    pass


class FoldingExceeded(RepeatError):
    exit_code = 3


class SpecInvalid(RepeatError):
    pass


class WarpNotInvertible(RepeatError):
    pass


class IndexOutOfRange(RepeatError):
    pass


class ConfigError(RepeatError):
    pass


class ZeroVarianceWarning(UserWarning):
    """NCC evaluated on a region where one image is constant."""


class MaskValueWarning(UserWarning):
    """A mask file held values other than 0 and 1 and was binarized."""
