"""Exception hierarchy shared by all voxelnet modules."""


class VoxelnetError(Exception):
    """Base class for every error raised by voxelnet."""


class DimensionError(VoxelnetError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(VoxelnetError, ValueError):
    """A scalar argument or hyperparameter is out of its valid range."""


class DegenerateInputError(VoxelnetError, ValueError):
    """Input data carries no usable signal (e.g. a constant volume)."""


class FormatError(VoxelnetError, ValueError):
    """A binary or text file does not match its declared format.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergedError(VoxelnetError, RuntimeError):
    """Training produced a non-finite cost."""

    def __init__(self, epoch, batch=None, value=float("nan")):
        where = f"epoch {epoch}" if batch is None else f"epoch {epoch}, batch {batch}"
        super().__init__(f"training diverged at {where} (cost={value})")
        self.epoch = epoch
        self.batch = batch
        self.value = value
