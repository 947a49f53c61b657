"""Exception hierarchy shared by every bgdet module.

The CLI maps these onto its exit codes: configuration problems exit 2,
missing prerequisites exit 3 and unusable artifacts exit 4.
"""


class BGDetError(Exception):
    """Base class for all bgdet errors."""


class ConfigError(BGDetError, ValueError):
    """Invalid configuration or parameter values."""


class ShapeError(BGDetError, ValueError):
    """Tensor or image dimensions violate a network contract."""


class AnnotationError(BGDetError, ValueError):
    """A label file could not be parsed."""


class NumericalError(BGDetError, ArithmeticError):
    """Non-finite or out-of-range values reached a loss."""


class ContractError(BGDetError, RuntimeError):
    """A runtime contract was violated (e.g. an unfrozen teacher)."""


class PrerequisiteError(BGDetError, RuntimeError):
    """A training stage or command ran before its inputs exist."""


class ArtifactError(BGDetError, RuntimeError):
    """A checkpoint or report on disk is missing, corrupt or of the wrong kind."""


class TrainingDiverged(BGDetError, RuntimeError):
    """A loss became non-finite; the last finite state was saved."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def exit_code(exc: BaseException) -> int:
    """Process exit status for an error raised by a command."""
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, PrerequisiteError):
        return 3
    if isinstance(exc, ArtifactError):
        return 4
    return 1
