"""Exception types raised across the package."""


class SupernetError(Exception):
    """Base class for all package errors."""


class DimensionError(SupernetError, ValueError):
    """Operand shapes are incompatible."""


class MaskError(SupernetError, ValueError):
    """An attention mask leaves a query row with nothing to attend to."""


class LabelError(SupernetError, ValueError):
    """A label index is out of range or collides with the blank symbol."""


class EvaluationError(SupernetError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FrozenMaskError(SupernetError, RuntimeError):
    """Attempt to modify a frozen pruning mask."""


class ScheduleError(SupernetError, ValueError):
    """A pruning request is inconsistent with the schedule."""


class ConfigError(SupernetError, ValueError):
    """Invalid or unknown configuration."""


class DivergenceError(SupernetError, RuntimeError):
    """Training loss became non-finite."""


class CheckpointError(SupernetError, RuntimeError):
    """A checkpoint is missing, malformed, or incompatible."""


class InvariantError(SupernetError, AssertionError):
    """An internal run invariant was violated."""
