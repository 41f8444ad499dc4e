"""Exception hierarchy shared by every module of the package."""


class RealSmileError(Exception):
    """Base class for all errors raised by realsmilenet."""


class ShapeError(RealSmileError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class ArgumentError(RealSmileError, ValueError):
    """An argument is outside its permitted range."""


class ConfigError(RealSmileError, ValueError):
    """A model or training configuration is internally inconsistent."""


class StateError(RealSmileError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class NumericalError(RealSmileError, FloatingPointError):
    """A NaN or Inf appeared at an operation boundary."""


class DataError(RealSmileError, ValueError):
    """Dataset content is missing, malformed or unusable."""


class InputError(DataError):
    """A single input (video, frame, crop box) is unusable."""


class FormatError(RealSmileError, ValueError):
    """A serialized file is corrupt or of an unsupported version."""
