"""Exception hierarchy shared by every module."""


class SetHashError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameter(SetHashError, ValueError):
    pass


class DimensionMismatch(SetHashError, ValueError):
    pass


class ShapeMismatch(SetHashError, ValueError):
    pass


class LengthMismatch(SetHashError, ValueError):
    pass


class NonFiniteValue(SetHashError, ValueError):
    pass


class EmptyDataset(SetHashError, ValueError):
    pass


class EmptySet(SetHashError, ValueError):
    pass


class EmptyBatch(SetHashError, ValueError):
    pass


class EmptyIndex(SetHashError, ValueError):
    pass


class EmptyInput(SetHashError, ValueError):
    pass


class LabelAbsent(SetHashError, ValueError):
    pass


class LabelConflict(SetHashError, ValueError):
    """Records sharing a set_id carry different labels."""


class TooFewVectors(SetHashError, ValueError):
    pass


class TapeMismatch(SetHashError, ValueError):
    """A backward pass was handed a tape recorded for different inputs."""


class NoValidTriplet(SetHashError, ValueError):
    pass


class TieEncountered(SetHashError, RuntimeError):
    """Every gradient-check probe landed on a non-differentiable point."""


class FormatError(SetHashError):
    """Base class for on-disk format problems."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class CorruptPayload(FormatError):
    pass


class IoFailure(SetHashError, OSError):
    pass
