"""Exception and warning types shared across the toolkit."""


class CrykitError(Exception):
    """Base class for all crykit errors."""


# -- audio ingestion -------------------------------------------------------

class ParseError(CrykitError):
    """Malformed RIFF/WAVE container."""


class UnsupportedFormat(CrykitError):
    """WAV codec or bit depth we do not read."""


class EmptyAudio(CrykitError):
    """File decoded to zero samples."""


class UnsupportedRate(CrykitError):
    """Sample rate below the resampler's minimum."""


# -- feature extraction ----------------------------------------------------

class TooShort(CrykitError):
    """Clip shorter than one analysis window."""


# -- numerics / model ------------------------------------------------------

class ShapeError(CrykitError):
    """Operand shapes are incompatible."""


class NumericalError(CrykitError):
    """NaN or Inf appeared where finite values are required."""


class StabilityError(CrykitError):
    """Discretized memory system has spectral radius >= 1."""


class ConfigError(CrykitError):
    """Invalid or inconsistent configuration."""


class LabelError(CrykitError):
    """Label outside the active label space."""


# -- data management -------------------------------------------------------

class NamingError(CrykitError):
    """Filename does not follow the expected naming convention."""


class SplitError(CrykitError):
    """Not enough groups to form disjoint splits."""


class DataError(CrykitError):
    """Manifest contents are unusable (duplicates, empty classes, ...)."""


class LeakageError(CrykitError):
    """A group key appears in more than one split."""


class IoError(CrykitError):
    """Missing or unreadable artifact file."""


# -- calibration / fusion --------------------------------------------------

class CalibrationError(CrykitError):
    """Temperature fitting cannot proceed (degenerate logits, ...)."""


class CaseStudyFailure(CrykitError):
    """A bundled fusion case study did not reproduce its expected outcome."""


class StratifyWarning(UserWarning):
    """A class ended up absent from one of the splits."""
