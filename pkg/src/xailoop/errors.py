"""Exception types shared across the toolkit."""


class XailoopError(Exception):
    """Base class for every toolkit error."""


class BadParameter(XailoopError):
    """An argument is outside its documented range."""


class BadConfig(XailoopError):
    """A configuration document is inconsistent or incomplete."""


class DimensionMismatch(XailoopError):
    """Paired rasters do not share dimensions."""


class PaletteViolation(XailoopError):
    """A mask PNG contains a color outside the canonical palette."""

    def __init__(self, x: int, y: int, color):
        self.x, self.y, self.color = x, y, tuple(int(c) for c in color)
        super().__init__(f"off-palette pixel {self.color} at ({x}, {y})")


class InvalidPolygon(XailoopError):
    """A correction polygon has <3 vertices or self-intersects."""


class EmptyClass(XailoopError):
    """A class-balancing input has no samples for some class."""


class ShapeMismatch(XailoopError):
    """Array shapes are incompatible."""


class EmptyDataset(XailoopError):
    """A training set is empty."""


class NonFiniteLoss(XailoopError):
    """Training diverged to a non-finite loss."""


class BadClassIndex(XailoopError):
    """A class index is outside the active class list."""


class LengthMismatch(XailoopError):
    """Paired sequences have different lengths."""


class SingularSystem(XailoopError):
    """An unregularized least-squares system is singular."""


class TooManyRegions(XailoopError):
    """Exhaustive coalition enumeration was requested for too many regions."""


class ExplainerBackendError(XailoopError):
    """The model adapter failed while serving an explainer."""


class OutOfBounds(XailoopError):
    """A hyperparameter value lies outside its search dimension."""


class NumericalFailure(XailoopError):
    """A linear-algebra routine failed even after jitter escalation."""


class TooFewSamples(XailoopError):
    """Not enough samples per class for a stratified split."""


class InsufficientImages(XailoopError):
    """A rating session asked for more images than a class provides."""


class UnknownItem(XailoopError):
    """A rating item id does not exist in the session."""


class AlreadyGraded(XailoopError):
    """A rating item already holds a grade."""


class GradeOutOfRange(XailoopError):
    """A submitted grade is not an integer in 0..5."""


class SessionIncomplete(XailoopError):
    """Aggregation was requested on a session with ungraded items."""


class EmptyCandidates(XailoopError):
    """Model selection was given no candidates."""


class RaterTimeout(XailoopError):
    """The interactive rater stayed idle beyond the configured limit."""
