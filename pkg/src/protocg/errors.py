"""Exception types shared across the package."""


class ProtocgError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ProtocgError):
    """Operands have incompatible shapes; message names both."""


class ParameterError(ProtocgError):
    """A hyperparameter or argument is outside its valid range."""


class ContractError(ProtocgError):
    """An internal API precondition was violated by the caller."""


class ConfigError(ProtocgError):
    """The training config file is missing keys, has unknown keys, or fails validation."""


class DataFormatError(ProtocgError):
    """An input data file is unreadable or too malformed to trust."""


class CheckpointError(ProtocgError):
    """A checkpoint file failed its magic, version, or integrity checks."""


class TrainingDiverged(ProtocgError):
    """The training loss went non-finite or exploded; the last good checkpoint is kept."""
