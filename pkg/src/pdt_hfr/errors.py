"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so keep the classes coarse.
"""


class PdtError(Exception):
    """Base class for all library errors."""


class DimensionError(PdtError, ValueError):
    """A tensor has the wrong rank or size along some axis."""


class ConfigError(PdtError, ValueError):
    """Invalid configuration value or incompatible layer geometry."""


class ValidationError(PdtError, ValueError):
    """Invalid argument values (labels, scores, empty inputs)."""


class NumericDegenerateError(PdtError, ArithmeticError):
    """A computation hit a degenerate point (zero norm, zero bandwidth)."""


class GraphUsageError(PdtError, RuntimeError):
    """Misuse of the autodiff tape, e.g. backward from a non-scalar."""


class FormatError(PdtError, ValueError):
    """Malformed or mismatched container/manifest content."""


class DataError(PdtError, ValueError):
    """The dataset cannot satisfy the request (too few identities, ...)."""


class TrainingDiverged(PdtError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, history):
        self.epoch = epoch
        self.batch = batch
        self.history = list(history)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"loss history: {self.history}"
        )
