"""Exception types shared across the package."""


class SpkDistillError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SpkDistillError, ValueError):
    pass


class ShapeError(SpkDistillError, ValueError):
    pass


class NumericsError(SpkDistillError, ArithmeticError):
    """A NaN or Inf showed up in a forward value or a gradient."""


class StateError(SpkDistillError, RuntimeError):
    """Parameter/optimizer/EMA state does not line up with its target."""


class SilentInput(SpkDistillError, ValueError):
    pass


class RateMismatch(SpkDistillError, ValueError):
    pass


class TooShort(SpkDistillError, ValueError):
    pass


class InsufficientData(SpkDistillError, ValueError):
    pass


class LabelError(SpkDistillError, ValueError):
    pass


class UnitError(SpkDistillError, ValueError):
    pass


class StratificationError(SpkDistillError, ValueError):
    pass


class ManifestError(SpkDistillError, ValueError):
    pass


class FormatError(SpkDistillError, ValueError):
    """A checkpoint or codebook file is truncated, corrupt or has the wrong version."""


class IoError(SpkDistillError, OSError):
    pass
