"""Exception types raised across the package."""


class OccError(Exception):
    """Base class for every error raised by occ4d."""


class FormatError(OccError, ValueError):
    """A binary or JSON file does not match its declared layout."""


class ShapeMismatch(OccError, ValueError):
    pass


class WidthMismatch(ShapeMismatch):
    pass


class NumericalFailure(OccError, ArithmeticError):
    pass


# grid
class UnknownSourceLabel(OccError, KeyError):
    def __init__(self, label):
        super().__init__(label)
        self.label = label

    def __str__(self):
        return f"source label {self.label!r} is not in the label map"


class IndexOutOfBounds(OccError, IndexError):
    pass


class PaletteSizeMismatch(OccError, ValueError):
    pass


# codec
class TableShapeMismatch(ShapeMismatch):
    pass


class PatchSizeIndivisible(OccError, ValueError):
    pass


class ChannelLayoutMismatch(ShapeMismatch):
    pass


# text
class EmptyPrompt(OccError, ValueError):
    pass


class MalformedFeatureFile(FormatError):
    pass


# backbone / flow
class HeadDimIndivisible(OccError, ValueError):
    pass


class HorizonOutOfRange(OccError, ValueError):
    pass


# corpus
class AgentOutOfBounds(OccError, ValueError):
    pass


class ScoreOutOfRange(OccError, ValueError):
    pass


# eval
class DegenerateCovariance(OccError, ArithmeticError):
    pass


class TooFewPoints(OccError, ValueError):
    pass


class RowNotNormalized(OccError, ValueError):
    pass


class ClipTooShort(OccError, ValueError):
    pass


class MalformedJudgeReply(OccError, ValueError):
    pass


class EndpointUnreachable(OccError, ConnectionError):
    pass
