"""Exception types shared across the package."""


class CaptionerError(Exception):
    """Base class for every error raised on purpose by this package."""


class InputError(CaptionerError, ValueError):
    """Bad data handed to an operation (empty clip, zero-norm vector, ...)."""


class ConfigError(CaptionerError, ValueError):
    """Invalid configuration value or inconsistent settings."""


class DimensionError(CaptionerError, ValueError):
    """Tensor shapes do not fit together."""


class ContractError(CaptionerError, RuntimeError):
    """An operation was called outside its precondition."""


class CheckpointError(CaptionerError, IOError):
    """A checkpoint directory could not be read back faithfully."""
