"""Exception hierarchy shared across the pipeline.

Two branches matter to the CLI: ``ConfigError`` subclasses map to exit
code 1 (bad input/configuration), everything else derived from
``ImpactError`` maps to exit code 2 (runtime failure).
"""


class ImpactError(Exception):
    """Base class for all package errors."""


class ConfigError(ImpactError):
    """Invalid configuration or argument; caller can fix and retry."""


# --- audio_io ---------------------------------------------------------------

class UnreadableFile(ImpactError):
    """WAV container is corrupt or truncated."""


class UnsupportedEncoding(ImpactError):
    """WAV payload is not PCM int (8/16/24/32) or 32-bit float."""


class SilentClip(ImpactError):
    """RMS below threshold; recording is unusable."""


class DegenerateClip(ImpactError):
    """Constant signal; z-score normalization undefined."""


# --- dsp --------------------------------------------------------------------

class DegenerateBand(ImpactError):
    """A mel filter row is all zero; too many bands for this FFT size."""


class WrongDuration(ImpactError):
    """Clip length does not match the spectrogram contract."""


class TooShort(ImpactError):
    """Signal shorter than one analysis segment."""


# --- model ------------------------------------------------------------------

class ShapeMismatch(ImpactError):
    """Tensor shape violates the model geometry."""


# --- ssl_train --------------------------------------------------------------

class EmptyMask(ImpactError):
    """Frame loss requested with no masked patches."""


class NonFiniteLoss(ImpactError):
    """Training diverged; loss is NaN or infinite."""


class StructureMismatch(ImpactError):
    """Student and teacher parameter sets do not line up."""


# --- probe_bench ------------------------------------------------------------

class ClassTooSmall(ImpactError):
    """A class has too few samples to split."""


class LengthMismatch(ImpactError):
    """Prediction and truth vectors differ in length."""


# --- synthgen ---------------------------------------------------------------

class InvalidSpec(ConfigError):
    """Machine sound specification violates its invariants."""


class IoFailure(ImpactError):
    """Could not write corpus files."""
