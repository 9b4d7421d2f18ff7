"""Exception hierarchy shared by every module."""


class MtlPoseError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShapeError(MtlPoseError, ValueError):
    pass


class InvalidArgumentError(MtlPoseError, ValueError):
    pass


class InvalidStateError(MtlPoseError, RuntimeError):
    pass


class DivergenceError(MtlPoseError, ArithmeticError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class LocalityViolationError(MtlPoseError, ValueError):
    """A fully connected layer was used where only local connectivity is valid."""


class CheckpointError(MtlPoseError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
