"""Exception types shared across the toolkit."""


class DeblurLabError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DeblurLabError, ValueError):
    """Tensor or image shapes do not agree."""


class ConfigurationError(DeblurLabError, ValueError):
    """A configuration object violates its invariants."""


class ParameterError(DeblurLabError, ValueError):
    """An operation received an out-of-range parameter."""


class GraphStateError(DeblurLabError, RuntimeError):
    """The autodiff graph was used in an invalid state."""


class ConvergenceError(DeblurLabError, RuntimeError):
    """An iterative solver failed to make progress."""


class NumericError(DeblurLabError, ArithmeticError):
    """Non-finite or otherwise invalid numeric data."""


class EmptyDatasetError(DeblurLabError, ValueError):
    """A dataset or split contains no pairs."""


class CheckpointError(DeblurLabError, IOError):
    """A checkpoint file is malformed or does not match the model."""
