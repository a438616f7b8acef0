class PosekitError(Exception):
    """Base class for library errors."""


class ShapeError(PosekitError, ValueError):
    """Tensor shapes or channel counts do not fit the operation."""


class ConfigError(PosekitError, ValueError):
    """Invalid model, training or dataset configuration."""


class NumericalError(PosekitError, FloatingPointError):
    """NaN/Inf encountered, or a gradient check failed."""
