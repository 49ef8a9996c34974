"""Exception hierarchy shared across the package."""


class MsdclError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MsdclError, ValueError):
    """Operand shapes or ranks do not satisfy an operation's contract."""


class ParameterError(MsdclError, ValueError):
    """A numeric argument is outside its admissible range."""


class ConfigError(MsdclError, ValueError):
    """A configuration object or file failed validation."""


class NonFiniteError(MsdclError, FloatingPointError):
    """A forward computation produced NaN or Inf from finite inputs."""


class DegenerateRowError(MsdclError, ValueError):
    """A row with near-zero norm cannot be normalized."""


class DegenerateBatchError(MsdclError, ValueError):
    """The batch is too small for the requested operation."""


class DegenerateLabelsError(MsdclError, ValueError):
    """A label vector contains only one class."""


class DistributionError(MsdclError, ValueError):
    """Rows expected to be probability vectors do not sum to one."""


class CapacityError(MsdclError, ValueError):
    """More items offered than a fixed-capacity container can accept."""


class NormalizationError(MsdclError, ValueError):
    """Stored embeddings must be unit norm; an offered row is not."""


class EmptyQueueError(MsdclError, ValueError):
    """The queue holds no keys yet."""


class PlanError(MsdclError, ValueError):
    """A sub-batch plan is inconsistent with the batch it should cover."""


class WarmupError(MsdclError, RuntimeError):
    """The momentum queue holds fewer keys than the primary batch needs."""


class LedgerStateError(MsdclError, RuntimeError):
    """The activation ledger was queried before any step ran."""


class ScheduleError(MsdclError, ValueError):
    """Learning-rate schedule queried outside [0, total_steps]."""


class FormatError(MsdclError, ValueError):
    """A binary file does not match the expected layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingFailedError(MsdclError, RuntimeError):
    """Training diverged; carries the failure report."""

    def __init__(self, report: dict):
        super().__init__(report.get("reason", "training failed"))
        self.report = report
