"""Exception hierarchy shared by every pipeline stage.

Each exception carries an ``exit_code`` used by the CLI: 2 for configuration
problems, 3 for missing stage artifacts, 4 for numerical failures and 1 for
anything else.
"""


class PinnError(Exception):
    exit_code = 1


class ConfigError(PinnError, ValueError):
    exit_code = 2


class InvalidParams(ConfigError):
    pass


class InvalidDomain(ConfigError):
    pass


class InvalidDims(ConfigError):
    pass


class DimensionMismatch(PinnError, ValueError):
    pass


class MissingArtifact(PinnError):
    exit_code = 3


class NumericalError(PinnError, ArithmeticError):
    exit_code = 4


class SingularNetworkMatrix(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class NonFiniteInput(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class StepSizeUnderflow(NumericalError):
    pass


class OptimizerDiverged(NumericalError):
    pass


class LineSearchFailed(NumericalError):
    pass


class AllTermsDisabled(PinnError, ValueError):
    pass


class EmptySolution(PinnError, ValueError):
    pass


class GridTooLarge(PinnError, ValueError):
    pass


class TooFewTrajectories(PinnError, ValueError):
    pass


class IoFailure(PinnError, OSError):
    pass


class FormatVersionMismatch(PinnError):
    pass


class ChecksumMismatch(PinnError):
    pass


class TrajectoryFailed(NumericalError):
    """A solver error annotated with the trajectory that raised it."""

    def __init__(self, trajectory_id, cause):
        super().__init__(f"trajectory {trajectory_id}: {type(cause).__name__}: {cause}")
        self.trajectory_id = trajectory_id
        self.cause = cause


class ZeroLossTerm(UserWarning):
    """Emitted when weight calibration meets a loss term that is exactly zero."""
