"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or byte stream does not conform to one of the documented formats."""


class ValidationError(ValueError):
    """Well-formed input whose content violates a documented invariant."""


class GridTooLargeError(ValueError):
    """Guard for operations that are only meant to run on small test grids."""


class NothingToLearnError(RuntimeError):
    """A refinement round was requested with no scribbles and no kept labels."""


class TrainingDivergedError(RuntimeError):
    """Online training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss
