"""Exception types shared across the package."""


class PointsegError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(PointsegError):
    """Tensor/array shapes are incompatible for the requested operation."""


class ContractViolation(PointsegError):
    """An operation was called outside its documented preconditions."""


class DegenerateInput(PointsegError):
    """Input is structurally empty or otherwise unusable."""


class CloudParseError(PointsegError):
    """A point cloud file could not be parsed (carries a line number)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CloudFormatError(PointsegError):
    """A point cloud file violates the declared column layout."""


class TrainingDiverged(PointsegError):
    """Training produced a non-finite loss; message names the first bad tensor."""
