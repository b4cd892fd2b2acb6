"""Exception types raised across the package."""


class DelaySmpError(Exception):
    """Base class for all package errors."""


class NonAlignedHorizon(DelaySmpError):
    pass


class InvalidDelay(DelaySmpError):
    pass


class IndexUnderflow(DelaySmpError):
    pass


class EvaluatorFailure(DelaySmpError):
    pass


class DimensionMismatch(DelaySmpError):
    pass


class EpsNotAligned(DelaySmpError):
    pass


class EpsNotLessThanDelta(DelaySmpError):
    pass


class NonFinite(DelaySmpError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NoConvergence(DelaySmpError):
    def __init__(self, message, max_iter=None):
        super().__init__(message)
        self.max_iter = max_iter


class SingularRegression(DelaySmpError):
    pass


class UnsupportedDiagonal(DelaySmpError):
    pass


class RegimeUnsupported(DelaySmpError):
    pass


class InsufficientLadder(DelaySmpError):
    pass


class RiccatiBlowup(DelaySmpError):
    pass


class TreeTooLarge(DelaySmpError):
    pass


class ConfigInvalid(DelaySmpError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
