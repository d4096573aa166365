"""Exception hierarchy shared by all neurotok modules.

Every error carries a short machine-parsable ``code`` (the class name minus
the ``Error`` suffix) that the CLI prints on a single line before exiting.
"""


class NeurotokError(Exception):
    """Base class for all neurotok errors."""

    @property
    def code(self) -> str:
        name = type(self).__name__
        return name[:-5] if name.endswith("Error") else name


# core
class ConstantChannelError(NeurotokError):
    pass


class InvalidRangeError(NeurotokError):
    pass


class InvalidWindowError(NeurotokError):
    pass


class IoError(NeurotokError):
    @property
    def code(self) -> str:
        return "Io"


class FormatError(NeurotokError):
    pass


# fixedtok
class DomainError(NeurotokError):
    pass


class EmptyDataError(NeurotokError):
    pass


class InvalidVocabError(NeurotokError):
    pass


class DegenerateQuantilesError(NeurotokError):
    pass


class VocabMismatchError(NeurotokError):
    pass


# nnkit
class ShapeMismatchError(NeurotokError):
    pass


class StaleCacheError(NeurotokError):
    pass


class LabelOutOfRangeError(NeurotokError):
    pass


# gpt
class ContextTooLongError(NeurotokError):
    pass


class EmptyHistogramError(NeurotokError):
    pass


# eval
class ZeroVarianceError(NeurotokError):
    pass


class WindowTooLongError(NeurotokError):
    pass


class GridMismatchError(NeurotokError):
    pass


class LagTooLargeError(NeurotokError):
    pass


class DegenerateCurveError(NeurotokError):
    pass


class DegenerateGroupError(NeurotokError):
    pass


class SingleClassError(NeurotokError):
    pass


# cli
class ConfigError(NeurotokError):
    pass
