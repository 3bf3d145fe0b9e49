"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MMFPError(Exception):
    exit_code = 1


class ConfigError(MMFPError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 3


class ShapeError(MMFPError, ValueError):
    """Tensor or dataset dimensions do not line up."""

    exit_code = 3


class FormatError(MMFPError, ValueError):
    """A binary artifact has a bad magic, version or length."""

    exit_code = 2


class ProvenanceError(MMFPError):
    """Artifacts were generated from different environments."""

    exit_code = 4


class CorrelationError(MMFPError, ValueError):
    """Normalized correlation is undefined for an all-zero snapshot."""

    exit_code = 3


class TrainingDivergedError(MMFPError, FloatingPointError):
    """The training loss became non-finite."""

    exit_code = 5

    def __init__(self, epoch, learning_rate, loss):
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate:g}, loss={loss})"
        )
