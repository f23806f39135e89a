"""Exception hierarchy shared by every subsystem."""


class TrunetError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(TrunetError, ValueError):
    """Invalid shapes, hyperparameters or model/experiment configuration."""


class UsageError(TrunetError, ValueError):
    """A call that violates an operation's preconditions."""


class DataError(TrunetError, ValueError):
    """Input data (labels, volumes) outside the accepted domain."""


class FormatError(TrunetError, ValueError):
    """Malformed, truncated or incompatible file on disk."""


class TrainingError(TrunetError, RuntimeError):
    """Training diverged or cannot continue."""
