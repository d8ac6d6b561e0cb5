"""Exception types shared across the toolkit."""


class AsmKitError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(AsmKitError):
    """Point counts or vector lengths do not agree."""


class DegenerateShape(AsmKitError):
    """A shape has zero spread (all points coincident)."""


class InsufficientData(AsmKitError):
    """Too few shapes to build or align a model."""


class RetentionUnsatisfiable(AsmKitError):
    """The requested component count exceeds the available positive modes."""


class ParamMismatch(AsmKitError):
    """A parameter vector does not match the model's component count."""


class BatchMismatch(AsmKitError):
    """Batches disagree in sample count or point count."""


class EpochOutOfRange(AsmKitError):
    """Epoch index outside [0, total_epochs)."""


class InvalidConfig(AsmKitError):
    """A configuration value violates its documented constraints."""


class DimensionMismatch(AsmKitError):
    """An input vector does not match the regressor's dimensions."""


class EmptyDataset(AsmKitError):
    """The training set is empty or too small to split."""


class EmptyInput(AsmKitError):
    """A metric was asked to aggregate an empty collection."""


class DegenerateNormalizer(AsmKitError):
    """The two eye-corner points coincide, so the error cannot be normalized."""


class FormatError(AsmKitError):
    """A text artifact violates its grammar.

    Carries the 1-based line number of the offending line when known.
    """

    def __init__(self, reason: str, line: int | None = None):
        self.reason = reason
        self.line = line
        super().__init__(f"line {line}: {reason}" if line is not None else reason)
