"""Exception types raised by lsdr operations."""


class DimensionError(ValueError):
    """Array shapes or lengths do not match the operation's contract."""


class DomainError(ValueError):
    """An argument is outside the operation's mathematical domain."""


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class DegeneratePosteriorError(RuntimeError):
    """A posterior row normalizes to zero mass."""


class ClassMassError(RuntimeError):
    """A class has zero total mass where positive mass is required."""

    def __init__(self, class_index, message=None):
        self.class_index = class_index
        super().__init__(message or f"class {class_index} has zero total mass")


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class InvalidFoldsError(ValueError):
    """Cross-fitting fold count must be 0 (external nuisance) or >= 2."""


class VarianceUndefinedError(ValueError):
    """Sample variance requires at least two observations."""
