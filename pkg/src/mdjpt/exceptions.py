"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`MdjptError`,
which the CLI maps to exit code 1 (as it does plain ``ValueError`` from
config validation). Anything else is treated as an internal error.
"""


class MdjptError(Exception):
    """Base class for validation errors."""


class MissingFile(MdjptError, FileNotFoundError):
    pass


class SchemaViolation(MdjptError, ValueError):
    def __init__(self, field, detail=""):
        self.field = field
        msg = field if not detail else f"{field}: {detail}"
        super().__init__(msg)


class DuplicateTrial(MdjptError, ValueError):
    pass


class CorruptHeader(MdjptError, ValueError):
    pass


class DimensionMismatch(MdjptError, ValueError):
    pass


class UpsampleRequested(MdjptError, ValueError):
    pass


class BandOutOfRange(MdjptError, ValueError):
    pass


class TooFewCleanChannels(MdjptError, ValueError):
    pass


class UnknownChannelLabel(MdjptError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TrialTooShort(MdjptError, ValueError):
    pass


class SeriesTooShort(MdjptError, ValueError):
    pass


class NonFiniteActivation(MdjptError, FloatingPointError):
    pass


class DegenerateWindow(MdjptError, ValueError):
    pass


class EmptyList(MdjptError, ValueError):
    pass


class TooFewSubjects(MdjptError, ValueError):
    pass


class ZeroNormVector(MdjptError, ValueError):
    pass


class MismatchedCounts(MdjptError, ValueError):
    pass


class EmptySet(MdjptError, ValueError):
    pass


class InsufficientSubjects(MdjptError, ValueError):
    pass


class NonFiniteLoss(MdjptError, FloatingPointError):
    pass


class SingleClassTraining(MdjptError, ValueError):
    pass


class UndefinedAUROC(MdjptError, UserWarning):
    """Warning category: a class has no positive (or no negative) samples."""


class DegenerateCluster(MdjptError, ValueError):
    pass


class ZeroVariance(MdjptError, ValueError):
    pass


class InvalidSpec(MdjptError, ValueError):
    pass
