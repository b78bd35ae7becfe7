"""Exception types raised across the package."""


class LifemapError(Exception):
    """Base class for all package errors."""


# scene simulation
class OverlappingObjects(LifemapError):
    def __init__(self, a, b):
        super().__init__(f"objects {a} and {b} overlap")
        self.pair = (a, b)


class UnknownObject(LifemapError):
    pass


class InvalidScene(LifemapError):
    pass


class TooFewFrames(LifemapError):
    pass


# feature field
class InsufficientPoses(LifemapError):
    pass


class AllPixelsMasked(LifemapError):
    pass


class DuplicateFrame(LifemapError):
    pass


class Diverged(LifemapError):
    pass


# detection / query
class DimensionMismatch(LifemapError):
    pass


class UnknownLabel(LifemapError):
    pass


# file formats and transport
class FormatError(LifemapError):
    pass


class PayloadTooLarge(LifemapError):
    pass


class BadMagic(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class NeedMoreBytes(FormatError):
    """Raised by the frame decoder when the buffer ends before the frame does."""

    def __init__(self, needed):
        super().__init__(f"need at least {needed} more bytes")
        self.needed = needed


class VersionMismatch(LifemapError):
    pass


class SequenceGap(LifemapError):
    pass


class SessionFailed(LifemapError):
    pass
