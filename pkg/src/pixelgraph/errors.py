"""Exception hierarchy shared across the package."""


class PixelGraphError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(PixelGraphError):
    """Tensor shapes inconsistent with an operation's contract."""


class ParameterError(PixelGraphError):
    """A numeric parameter is outside its valid range."""


class ConfigError(PixelGraphError):
    """A configuration value or combination is invalid."""


class FusionError(PixelGraphError):
    """Node matrices from the two branches cannot be fused."""


class DomainError(PixelGraphError):
    """An elementwise function was applied outside its domain."""


class NumericError(PixelGraphError):
    """An operation produced NaN or Inf; never silently propagated."""


class TapeError(PixelGraphError):
    """Gradient tape misuse, e.g. backward called twice on one forward pass."""


class OracleError(PixelGraphError):
    """The finite-difference oracle cannot be trusted (non-deterministic target)."""


class DegenerateFitError(PixelGraphError):
    """Plane fit is singular or near-singular; the caller masks the pixel."""


class FormatError(PixelGraphError):
    """A file does not conform to its declared format.

    ``byte_offset`` points at the offending position when known.
    """

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class GenerationError(PixelGraphError):
    """Scene layout sampling failed to satisfy constraints."""


class UndefinedLossError(PixelGraphError):
    """A loss term has no defined value (e.g. every pixel ignored)."""


class TrainingDivergedError(PixelGraphError):
    """Training produced a non-finite loss; the message names the term."""


class CheckpointMismatchError(PixelGraphError):
    """Checkpoint parameters do not match the model built from the config."""
