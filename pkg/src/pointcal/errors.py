"""Exception hierarchy shared by all modules."""


class PointcalError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PointcalError, ValueError):
    pass


class EmptyInputError(PointcalError, ValueError):
    pass


class CountError(PointcalError, ValueError):
    pass


class NonFiniteError(PointcalError, FloatingPointError):
    """A NaN or Inf reached a tensor, a loss, or a gradient."""


class DegenerateCloudError(PointcalError, ValueError):
    pass


class ShapeBindingError(PointcalError, ValueError):
    """A spatial block received a row count other than the one it was built for."""


class UnsupportedModeError(PointcalError, ValueError):
    pass


class UndefinedMetricError(PointcalError, ValueError):
    pass


class ConfigError(PointcalError, ValueError):
    pass


class CheckpointError(PointcalError, ValueError):
    pass


class CloudFormatError(PointcalError, ValueError):
    pass
