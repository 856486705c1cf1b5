"""Exception hierarchy shared by every compspoof module."""


class CompSpoofError(Exception):
    """Base class for all library errors."""


# signal processing
class EmptySignal(CompSpoofError):
    pass


class SilentSignal(CompSpoofError):
    pass


class RateMismatch(CompSpoofError):
    pass


class LengthMismatch(CompSpoofError):
    pass


class SignalTooShort(CompSpoofError):
    pass


class GeometryMismatch(CompSpoofError):
    pass


class DomainError(CompSpoofError):
    pass


# autodiff / training
class ShapeError(CompSpoofError):
    pass


class NumericError(CompSpoofError):
    pass


class MissingGrad(CompSpoofError):
    pass


class EmptyBatch(CompSpoofError):
    pass


class CheckpointError(CompSpoofError):
    pass


class ConfigError(CompSpoofError):
    pass


# dataset forge
class DurationOutOfBounds(CompSpoofError):
    pass


class TooShort(DurationOutOfBounds):
    pass


class TooLong(DurationOutOfBounds):
    pass


class InsufficientPool(CompSpoofError):
    def __init__(self, pool: str, needed: int, available: int):
        super().__init__(f"pool '{pool}' has {available} files, {needed} needed")
        self.pool = pool
        self.needed = needed
        self.available = available


class TooFewForSplit(CompSpoofError):
    pass


# evaluation
class CoverageError(CompSpoofError):
    pass
