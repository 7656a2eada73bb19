"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit with 2,
numeric failures with 3 and I/O failures (including checkpoint errors) with 4.
"""


class MetaPinnError(Exception):
    """Base class for all package errors."""


class ConfigError(MetaPinnError, ValueError):
    """Inconsistent shapes, unknown keys, or out-of-range settings."""


class DomainError(MetaPinnError, ValueError):
    """A point or set lies outside the region an operation accepts."""


class NumericError(MetaPinnError, ArithmeticError):
    """A NaN or Inf showed up where a finite value was required.

    ``layer`` is the index of the layer that produced it (forward passes) and
    ``index`` the offending point index (loss evaluation), when known.
    """

    def __init__(self, message, *, layer=None, index=None, checkpoint=None):
        super().__init__(message)
        self.layer = layer
        self.index = index
        self.checkpoint = checkpoint


class ParseError(MetaPinnError, ValueError):
    """Malformed PDE expression; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.message = message
        self.offset = offset
        self.text = text
        super().__init__(f"{message} (at byte {offset})")

    def pretty(self) -> str:
        if not self.text:
            return str(self)
        return f"{self}\n  {self.text}\n  {' ' * self.offset}^"


class CheckpointError(MetaPinnError, OSError):
    """Base class for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass
