"""
Errors Module

Exception hierarchy shared by every stage of the tactile-transfer pipeline.
The CLI turns any ElectroARError into exit status 1 and prints its class name,
so each failure mode gets its own class.
"""


class ElectroARError(Exception):
    """Base exception for all simulator errors."""
    pass


class ConfigError(ElectroARError):
    """Exception raised when settings fail to load or validate."""
    pass


# --- grid ---

class GridError(ElectroARError):
    """Base exception for pressure-grid errors."""
    pass

class DegenerateGrid(GridError):
    """Exception raised when a grid is too small for the requested operation."""
    pass

class GeometryMismatch(GridError):
    """Exception raised when two geometries that must agree do not."""
    pass

class ValueOutOfRange(GridError):
    """Exception raised when a pressure sample falls outside [0, 65535]."""
    pass


# --- psychophysics ---

class PsychophysicsError(ElectroARError):
    """Base exception for transfer-function errors."""
    pass

class DomainError(PsychophysicsError):
    """Exception raised when an argument lies outside a function's domain."""
    pass

class FitError(PsychophysicsError):
    """Base exception for calibration fitting failures."""
    pass

class InsufficientData(FitError):
    """Exception raised when fewer than three distinct probability levels are supplied."""
    pass

class NonPositiveMagnitude(FitError):
    """Exception raised when a reported magnitude is zero or negative."""
    pass

class DegenerateFit(FitError):
    """Exception raised when the data admit no increasing sigmoid (slope <= 0)."""
    pass


# --- transport ---

class FrameError(ElectroARError):
    """Base exception for wire-frame encoding and decoding errors."""
    pass

class BadMagic(FrameError):
    """Exception raised when a frame does not start with the EARF magic."""
    pass

class UnsupportedVersion(FrameError):
    """Exception raised when a frame carries an unknown version byte."""
    pass

class TruncatedFrame(FrameError):
    """Exception raised when fewer bytes are present than the frame declares."""
    pass

class ChecksumMismatch(FrameError):
    """Exception raised when the CRC-32 trailer does not match."""
    pass

class TrailingData(FrameError):
    """Exception raised when bytes follow a complete, valid frame."""
    pass

class MalformedFrame(FrameError):
    """Exception raised when a checksummed frame carries invalid field values."""
    pass

class ValueOverflow(FrameError):
    """Exception raised when a payload value or counter does not fit its field."""
    pass

class GeometryOverflow(FrameError):
    """Exception raised when a grid dimension does not fit in one byte."""
    pass


# --- patterns / recordings ---

class PatternError(ElectroARError):
    """Base exception for stimulus generation errors."""
    pass

class InvalidPattern(PatternError):
    """Exception raised when generator parameters fall outside their allowed set."""
    pass

class RecordingError(ElectroARError):
    """Base exception for recording file errors."""
    pass

class BadHeader(RecordingError):
    """Exception raised when a recording header is missing or malformed."""
    pass

class VersionMismatch(RecordingError):
    """Exception raised when a recording declares an unsupported format version."""
    pass

class CorruptFrame(RecordingError):
    """Exception raised when a recording body frame fails to decode."""
    pass


# --- analysis ---

class AnalysisError(ElectroARError):
    """Base exception for recognition and tabulation errors."""
    pass

class EmptyTemplates(AnalysisError):
    """Exception raised when a classifier is given fewer than two templates."""
    pass

class UndefinedNormalization(AnalysisError):
    """Exception raised when an all-zero map has to be unit-normalised."""
    pass

class SeriesTooShort(AnalysisError):
    """Exception raised when a map series is shorter than one scroll cycle."""
    pass

class LabelMismatch(AnalysisError):
    """Exception raised when trial labels are not drawn from one class set."""
    pass
