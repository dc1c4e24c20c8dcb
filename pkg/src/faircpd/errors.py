"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible for the requested operation."""


class DegenerateInputError(ValueError):
    """Input makes the requested quantity undefined (e.g. a zero-norm tensor)."""


class UndefinedAlignmentError(DegenerateInputError):
    """A centered Gram matrix is identically zero, so the alignment has no value."""


class InvalidModeError(ValueError):
    """A factor mode that does not exist on the model was requested."""


class DivergenceError(RuntimeError):
    """The optimizer produced a non-finite objective or factor."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"optimization diverged at epoch {epoch}")


class ResourceError(RuntimeError):
    """The request exceeds the supported problem size."""


class FormatError(ValueError):
    """A data file does not match the expected layout."""
