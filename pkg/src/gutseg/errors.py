"""Exception types shared across the package."""


class GutsegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GutsegError, ValueError):
    """Operand dimensions are inconsistent with an operation's contract."""


class RleParseError(GutsegError, ValueError):
    """A run-length string violates the mask encoding contract."""


class DatasetError(GutsegError, ValueError):
    """Dataset tree or annotation data is malformed."""


class WeightsFormatError(GutsegError, ValueError):
    """A weight file is corrupt or written by an incompatible version."""


class ConfigError(GutsegError, ValueError):
    """Invalid configuration value or combination."""


class TrainingDiverged(GutsegError, RuntimeError):
    """Training produced a non-finite loss."""
