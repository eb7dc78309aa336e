"""Exception hierarchy shared by all msclip modules."""

from __future__ import annotations


class MsClipError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfig(MsClipError, ValueError):
    pass


class MissingBand(MsClipError, KeyError):
    def __init__(self, band: str):
        super().__init__(band)
        self.band = band

    def __str__(self) -> str:
        return f"band {self.band!r} is not present"


class EmptyDataset(MsClipError, ValueError):
    pass


class InconsistentBands(MsClipError, ValueError):
    pass


class ShapeMismatch(MsClipError, ValueError):
    pass


class InvalidPositions(MsClipError, ValueError):
    pass


class MissingEOS(MsClipError, ValueError):
    pass


class TokenOutOfRange(MsClipError, ValueError):
    pass


class UnknownPattern(MsClipError, ValueError):
    pass


class NonFiniteInput(MsClipError, ValueError):
    pass


class NonFiniteGradient(MsClipError, FloatingPointError):
    pass


class StepOutOfRange(MsClipError, IndexError):
    pass


class DivergedLoss(MsClipError, FloatingPointError):
    pass


class EmptyTemplates(MsClipError, ValueError):
    pass


class LabelNotInClassSet(MsClipError, KeyError):
    pass


class EmptyCorpus(MsClipError, ValueError):
    pass


class EmptyCaption(MsClipError, ValueError):
    pass


class EmptyText(MsClipError, ValueError):
    pass


class CorpusTooSmall(MsClipError, ValueError):
    pass


class FormatError(MsClipError, ValueError):
    """A file on disk does not match the expected binary or JSON layout."""
