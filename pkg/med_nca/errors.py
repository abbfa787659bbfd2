"""Exception types raised by the Med-NCA library layer.

The harness catches ``MedNcaError`` and turns it into an error result, so
anything a user can trigger from the command line derives from it.
"""


class MedNcaError(Exception):
    """Base class for every error raised by med_nca."""


class ShapeError(MedNcaError, ValueError):
    """Tensor shapes are inconsistent with what an operation expects."""


class NonFiniteError(MedNcaError, FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class TapeError(MedNcaError):
    """Backward pass requested on something the tape cannot differentiate."""


class CheckpointError(MedNcaError):
    """Checkpoint bytes are corrupt or of an unknown format."""


class PgmFormatError(MedNcaError):
    """A PGM file could not be parsed."""


class ManifestError(MedNcaError):
    """Dataset manifest is missing, malformed or inconsistent."""


class ConfigError(MedNcaError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DivergenceError(MedNcaError):
    """Training loss became non-finite."""
