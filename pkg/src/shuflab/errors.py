"""Exception types shared across the package."""


class ShuflabError(Exception):
    """Base class; ``kind`` is used for machine-readable CLI errors."""

    kind = "error"


class ConfigurationError(ShuflabError, ValueError):
    kind = "configuration"


class ExhaustedBankError(ShuflabError, RuntimeError):
    kind = "exhausted-bank"


class DivisionByZeroError(ShuflabError, ZeroDivisionError):
    kind = "division-by-zero"


class DetectionFailure(ShuflabError, RuntimeError):
    kind = "detection-failure"


class SegmentationError(ShuflabError, RuntimeError):
    kind = "segmentation"


class BoundaryNotFound(DetectionFailure):
    kind = "boundary-not-found"


class UndefinedCorrelation(ShuflabError, ValueError):
    kind = "undefined-correlation"


class AttackUndefined(ShuflabError, ValueError):
    kind = "attack-undefined"


class LibraryMismatch(ShuflabError, LookupError):
    kind = "library-mismatch"


class ModeMismatch(ShuflabError, ValueError):
    kind = "mode-mismatch"


class FormatError(ShuflabError, ValueError):
    kind = "format"
