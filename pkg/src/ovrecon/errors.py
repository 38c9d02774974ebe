"""Exception taxonomy shared by every engine module.

Two broad families matter for the CLI exit codes: validation-style errors
(bad shapes, bad inputs, malformed files) exit with code 2, numeric-style
failures (estimation did not converge, non-finite values) exit with code 3.
"""


class EngineError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class ShapeError(EngineError):
    """Operand dimensions do not satisfy the operation's contract."""


class ContractError(EngineError):
    """A precondition on the inputs was violated."""


class DomainError(EngineError):
    """A value is outside the mathematical domain of the operation."""


class DegeneracyError(EngineError):
    """Point configuration too degenerate for a well-posed estimate."""


class ValidationError(EngineError):
    """A manifest, scene directory, or other artifact failed validation."""


class FormatError(EngineError):
    """A binary file does not start with the expected structure."""


class CorruptionError(EngineError):
    """A binary file's declared sizes disagree with its payload."""


class UnsupportedError(EngineError):
    """A file declares a version or dtype this build does not handle."""


class NumericError(EngineError):
    """A computation produced non-finite values."""

    exit_code = 3


class EstimationFailureError(EngineError):
    """A robust estimator found no acceptable model."""

    exit_code = 3


class RegistrationFailureError(EngineError):
    """Too little overlap to register a local map into the scene."""

    exit_code = 3

    def __init__(self, message, overlap_count=0):
        super().__init__(message)
        self.overlap_count = overlap_count


class PredictorFailureError(EngineError):
    """A pointmap predictor failed; carries the offending window."""

    exit_code = 3

    def __init__(self, message, keyframe_id=None, frame_ids=()):
        super().__init__(message)
        self.keyframe_id = keyframe_id
        self.frame_ids = tuple(frame_ids)
