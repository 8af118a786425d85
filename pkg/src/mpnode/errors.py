"""Exception classes shared across the toolkit.

Every failure mode that callers are expected to handle gets its own class so
that the CLI can map error categories onto exit codes.
"""


class MpnodeError(Exception):
    """Base class for all toolkit errors."""


# --- time integration ---------------------------------------------------

class NonFiniteState(MpnodeError):
    """A solver stage produced NaN/Inf. Carries context about where."""

    def __init__(self, message, t=None, window=None):
        super().__init__(message)
        self.t = t
        self.window = window


class MaxStepsExceeded(MpnodeError):
    """Adaptive integration exceeded the configured step budget."""


# --- differentiation -----------------------------------------------------

class UnsupportedPrimitive(MpnodeError):
    """The objective applied an operation the tape cannot differentiate."""


class IndexOutOfRange(MpnodeError):
    """A parameter/grid index is outside the valid range."""


# --- models ---------------------------------------------------------------

class DimensionMismatch(MpnodeError):
    """Array shape inconsistent with a model or parameter specification."""


class TimeOutOfRange(MpnodeError):
    """Evaluation time outside the domain of a time-indexed control."""


# --- multistep penalty ----------------------------------------------------

class TooManyWindows(MpnodeError):
    """Requested more windows than there are integration steps."""


class AlignmentError(MpnodeError):
    """Prediction and data grids do not line up."""


class DivergedTraining(MpnodeError):
    """Loss stayed non-finite for too many consecutive optimizer steps."""


# --- data -----------------------------------------------------------------

class LengthExceedsData(MpnodeError):
    """A requested sub-trajectory is longer than the source trajectory."""


class EmptyTrajectory(MpnodeError):
    """An operation received a trajectory with no usable samples."""


# --- metrics ----------------------------------------------------------------

class GridMismatch(MpnodeError):
    """Two gridded quantities were compared on different grids."""


# --- shadowing oracle -------------------------------------------------------

class SingularSystem(MpnodeError):
    """The shadowing linear system could not be solved."""


# --- configuration / persistence --------------------------------------------

class ParseError(MpnodeError):
    """Malformed configuration text or an unrecognized key."""


class ValidationError(MpnodeError):
    """A configuration value violates its constraints."""


class FormatError(MpnodeError):
    """A data file does not match its declared on-disk format."""


class VersionError(MpnodeError):
    """A data file declares an unrecognized format version."""
