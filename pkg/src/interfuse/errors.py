"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure that can reach a
user goes through one of these classes.
"""


class FusionError(Exception):
    """Base class for all package errors."""


class ConfigError(FusionError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(FusionError):
    """Dataset-level problem (empty dataset, missing pair, bad manifest)."""


class ShapeError(DataError, ValueError):
    """Arrays or images whose shapes are incompatible."""


class SamplingError(FusionError, RuntimeError):
    """Mask placement failed within the attempt budget."""


class CheckpointError(FusionError, IOError):
    """Checkpoint could not be written, or is corrupt / of the wrong version."""


class NumericalError(FusionError, FloatingPointError):
    """Non-finite loss encountered during training."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
