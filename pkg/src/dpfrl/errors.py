"""Exception hierarchy shared across the package."""


class DpfrlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DpfrlError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(DpfrlError):
    """Input outside the mathematical domain of an operation (log/sqrt of a negative)."""


class ContractError(DpfrlError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericsError(DpfrlError):
    """A non-finite value appeared where finiteness is required."""


class ConfigError(DpfrlError):
    """Invalid configuration value, unknown key, or disabled feature."""


class FilterError(DpfrlError):
    """Particle filter update produced an invalid belief; carries step context."""


class TrainingError(DpfrlError):
    """Training loop aborted (non-finite loss or parameters)."""


class CheckpointError(DpfrlError):
    """Checkpoint file is malformed or does not match the model configuration."""
