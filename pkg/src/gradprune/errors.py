"""Exception hierarchy shared by every module of the package."""


class GradPruneError(Exception):
    """Base class for all errors raised by gradprune."""


class DimensionError(GradPruneError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InputError(GradPruneError, ValueError):
    """An argument is outside its documented domain."""


class StateError(GradPruneError, RuntimeError):
    """An operation was requested in a state that does not permit it."""


class ConfigError(GradPruneError, ValueError):
    """A configuration value or key is invalid."""


class DataError(GradPruneError, ValueError):
    """A dataset does not satisfy the requirements of an operation."""


class FormatError(DataError):
    """A file on disk does not follow the expected format."""


class ConsistencyError(DataError):
    """Two related inputs disagree (e.g. image and label counts)."""


class PersistenceError(GradPruneError, IOError):
    """A checkpoint could not be written or read back."""


class VersionError(PersistenceError):
    """A checkpoint has the wrong magic bytes or an unsupported version."""


class NumericDivergenceError(GradPruneError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
