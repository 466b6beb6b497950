"""Exception hierarchy shared across the package."""


class ERGLError(Exception):
    """Base class for all package errors."""


class DimensionError(ERGLError, ValueError):
    """Tensor shapes do not satisfy an operation's shape rule."""


class ContractError(ERGLError, RuntimeError):
    """A call violated an operation's precondition."""


class ConfigurationError(ERGLError, ValueError):
    """Invalid configuration value or combination."""


class InputTooShortError(ERGLError, ValueError):
    """Audio clip is shorter than one analysis window."""


class FormatError(ERGLError, ValueError):
    """Malformed file or record."""


class CompatibilityError(ERGLError, ValueError):
    """Checkpoint and data disagree (vocabulary, n, d)."""


class NumericalError(ERGLError, FloatingPointError):
    """Non-finite loss or value encountered during training."""


class CheckpointError(ERGLError, IOError):
    """Checkpoint file is corrupt, truncated, or of the wrong version."""
