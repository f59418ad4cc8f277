"""Exception hierarchy shared by every subsystem."""


class FddfError(Exception):
    """Base class for all package errors."""


class DimensionError(FddfError, ValueError):
    """Tensor shapes disagree with an operation's contract."""


class DegenerateBatchError(FddfError, ValueError):
    """Batch statistics are undefined (fewer than two values per channel)."""


class LabelError(FddfError, ValueError):
    pass


class RankError(FddfError, ValueError):
    pass


class UninitializedGradientError(FddfError, RuntimeError):
    pass


class NonFiniteError(FddfError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ParityError(FddfError, ValueError):
    pass


class ThresholdError(FddfError, ValueError):
    pass


class ImageError(FddfError, ValueError):
    """An image violates the RgbImage contract."""


class ConfigurationError(FddfError, ValueError):
    pass


class DegenerateDataError(FddfError, ValueError):
    pass


class DivergenceError(FddfError, RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ParseError(FddfError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


class FormatError(FddfError, ValueError):
    pass


class CorruptionError(FddfError, ValueError):
    pass


class ConsistencyError(FddfError, ValueError):
    pass
