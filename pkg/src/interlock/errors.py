"""Exception types shared across the package."""


class InterlockError(Exception):
    pass


class DimensionError(InterlockError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(InterlockError, ValueError):
    """A configuration value violates a constraint."""


class DataError(InterlockError, ValueError):
    """Input data is out of range or malformed."""


class DegenerateBatchError(InterlockError, ValueError):
    """Batch statistics cannot be computed from this batch."""


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteGradientError(InterlockError, FloatingPointError):
    def __init__(self, param_id, step):
        super().__init__(f"non-finite gradient in parameter {param_id!r} at step {step}")
        self.param_id = param_id
        self.step = step


class DeadlockError(InterlockError, RuntimeError):
    """The schedule simulator could not make progress."""


class WorkerError(InterlockError, RuntimeError):
    """A pipeline worker died or a channel closed early."""
