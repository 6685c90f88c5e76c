"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PipelineError):
    """Bad or incomplete configuration (missing files, env vars, bounds)."""


class SchemaError(PipelineError):
    """Violates a domain invariant (relation matrix, normalization, seeds)."""


class PlanError(PipelineError):
    """A distillation plan cannot be executed as stated (e.g. pool too small)."""


class GatewayError(PipelineError):
    """Base class for LLM-endpoint problems."""


class TransportError(GatewayError):
    """Retries exhausted on a transient failure; carries the last status."""

    def __init__(self, message: str, last_status: int | str | None = None):
        super().__init__(message)
        self.last_status = last_status


class RequestError(GatewayError):
    """Non-retryable rejection (4xx other than 429)."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class CostCapError(GatewayError):
    """The per-run hard request cap was hit."""


class FilterError(PipelineError):
    """Self-instruct filtering cannot proceed (bad labels, wrong relation)."""


class StoreError(PipelineError):
    """Graph store I/O or format problem."""


class EvalError(PipelineError):
    """Evaluation protocol violation (stratum too small, unknown ids)."""
