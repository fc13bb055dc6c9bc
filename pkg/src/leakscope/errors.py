"""Exception hierarchy shared across leakscope."""


class LeakscopeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(LeakscopeError):
    pass


class DataError(LeakscopeError):
    pass


class EmptyTrace(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedPacket(DataError):
    pass


class UnsupportedLinkType(DataError):
    pass


class AmbiguousDirection(DataError):
    pass


class FormatVersionMismatch(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, line_number: int, reason: str = ""):
        self.line_number = line_number
        msg = f"malformed line {line_number}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class Overflow(DataError):
    pass


class EmptyPool(DataError):
    pass


class ClassWithNoInstances(DataError):
    pass


class MixedVectorKinds(DataError):
    pass


class VocabularyMismatch(DataError):
    pass


class DegenerateFit(DataError):
    pass


class TooFewPerClass(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class MaxTooSmall(DataError):
    pass


class ShapeMismatch(DataError):
    pass
