"""Exception hierarchy shared across the package."""


class DenkfError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DenkfError, ValueError):
    """An input violates a documented precondition or type invariant."""


class TapeConsumedError(DenkfError, RuntimeError):
    """A gradient tape was passed to ``backward`` a second time."""


class TrainingError(DenkfError, RuntimeError):
    """Non-finite loss or gradients encountered while training."""


class FilterDivergenceError(DenkfError, RuntimeError):
    """The innovation covariance could not be factorized even after jitter escalation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class DatasetFormatError(DenkfError, ValueError):
    """A dataset file is malformed or violates a dataset invariant."""


class ConfigError(DenkfError, ValueError):
    """A configuration file or object failed validation."""


class IncompatibleCheckpointError(DenkfError, ValueError):
    """Checkpoint format or layout version does not match what the caller expects."""
