"""Exception types shared across the package."""


class NbQosError(Exception):
    """Base class for all package errors."""


class ParseError(NbQosError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDataError(NbQosError):
    pass


class DegenerateSplitError(NbQosError):
    pass


class TrainingDivergedError(NbQosError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class LeakageError(NbQosError):
    """Raised when test pairs are visible to training."""
