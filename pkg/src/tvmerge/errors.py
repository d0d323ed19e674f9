"""Exception hierarchy shared by every module.

The CLI prints ``type(exc).__name__`` for any :class:`TvMergeError`, so class
names double as stable, user-facing error codes.
"""


class TvMergeError(Exception):
    """Base class for domain errors."""


class InvalidArgument(TvMergeError, ValueError):
    pass


class ShapeMismatch(TvMergeError, ValueError):
    pass


class NonFinite(TvMergeError, ValueError):
    pass


class CheckpointError(TvMergeError):
    """Malformed checkpoint file. ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class BadMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class InvalidFraction(TvMergeError, ValueError):
    pass


class CoefficientArityMismatch(TvMergeError, ValueError):
    pass


class InvalidDistribution(TvMergeError, ValueError):
    pass


class EmptyPool(TvMergeError, ValueError):
    pass


class DivergedAtStep(TvMergeError):
    def __init__(self, step: int):
        super().__init__(f"mean entropy became non-finite at step {step}")
        self.step = step


class LengthMismatch(TvMergeError, ValueError):
    pass


class Empty(TvMergeError, ValueError):
    pass


class ParseError(TvMergeError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKey(TvMergeError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
