"""
Exception hierarchy shared by every module.
"""

from typing import Sequence, Tuple


class DeliberationError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DeliberationError, ValueError):
    """An op received operands whose shapes do not conform to its rule."""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shape_text = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GradientError(DeliberationError, ValueError):
    """Backward was asked for something it cannot differentiate."""


class GateError(DeliberationError, ValueError):
    """A gradient mask or parameter group references an unknown gate."""


class CheckpointError(DeliberationError):
    """A checkpoint file is malformed, truncated or from another format version."""


class CorpusError(DeliberationError, ValueError):
    """The toy corpus cannot be generated or read as configured."""


class ConfigError(DeliberationError, ValueError):
    """Configuration is missing, unreadable or invalid."""


class LabelError(DeliberationError, ValueError):
    """A label sequence is not acceptable to the transducer."""


class DecodeError(DeliberationError, ValueError):
    """Decoding or scoring was called with unusable inputs."""


class VariantError(DeliberationError, ValueError):
    """An operation was called on a model variant that lacks the required branch."""
