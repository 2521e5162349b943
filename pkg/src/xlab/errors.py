"""Exception types shared across the package."""


class XlabError(Exception):
    """Base class for package errors."""


class ShapeError(XlabError, ValueError):
    """An operation received tensors with incompatible shapes."""


class GraphError(XlabError, RuntimeError):
    """A graph was used out of order (unbound leaves, backward before forward,
    non-scalar output, reuse without reset)."""


class InvalidSpecError(XlabError, ValueError):
    """A model spec fails shape-chain validation."""


class CheckpointError(XlabError, ValueError):
    """A checkpoint or transferset file is corrupt, truncated, or of an
    unsupported version."""


class DatasetError(XlabError, ValueError):
    """Dataset ingestion or validation failed."""


class TrainingError(XlabError, RuntimeError):
    """Training aborted (non-finite loss, wrong label mode, heldout misuse)."""


class AttackError(XlabError, ValueError):
    """Attack configuration or precondition violated."""


class BudgetExhaustedError(XlabError, RuntimeError):
    """The prediction oracle refused a query batch that would overspend its
    budget. Carries the number of samples already served."""

    def __init__(self, message: str, queries_used: int | None = None):
        super().__init__(message)
        self.queries_used = queries_used


class OracleTransportError(XlabError, RuntimeError):
    """A remote oracle call failed at the transport level or returned a
    malformed response."""


class ConfigError(XlabError, ValueError):
    """Experiment configuration is invalid; message carries the field path."""


class ExperimentError(XlabError, RuntimeError):
    """An experiment stage failed or its outputs are insufficient."""
