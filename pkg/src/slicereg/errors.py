"""Exception types shared across the package."""


class SliceregError(Exception):
    pass


class DegenerateAnchors(SliceregError):
    """The three anchor points are (nearly) collinear."""


class NotARotation(SliceregError):
    """Matrix failed the orthonormality / determinant check."""


class ShapeMismatch(SliceregError):
    """Tensor or array shapes are incompatible for the requested op."""


class DimensionMismatch(SliceregError):
    """Counts of slices / transforms / weights disagree."""


class BreakdownDetected(SliceregError):
    """CG encountered a non-SPD direction (p'Ap <= 0)."""


class NotScalarLoss(SliceregError):
    """backward() called on a non-scalar tensor."""


class StaleTape(SliceregError):
    """backward() called twice on the same recorded graph."""


class NonFiniteLoss(SliceregError):
    """Training loss became NaN or infinite."""


class CountMismatch(SliceregError):
    """Evaluation inputs have inconsistent lengths."""


class MissingCheckpoint(SliceregError):
    """A study configuration references a checkpoint that does not exist."""


class ConfigError(SliceregError):
    """Bad or unknown configuration keys / values."""


class IoError(SliceregError):
    """File format violation or unreadable artifact."""
