"""Exception hierarchy shared across the toolkit."""


class MMPlanError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MMPlanError):
    """Invalid or missing configuration."""


class RenderError(MMPlanError):
    """A prompt template was rendered with an unbound placeholder."""


class BackendError(MMPlanError):
    """A model backend call failed."""


class TransportError(BackendError):
    """Network-level failure (connection refused, timeout). Retryable."""


class HttpStatusError(BackendError):
    """Non-2xx HTTP response from a backend."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status

    @property
    def retryable(self) -> bool:
        return self.status >= 500


class ProtocolError(BackendError):
    """Backend returned a response whose shape violates the wire contract."""


class VerdictParseError(MMPlanError):
    """Judge output could not be parsed into a score verdict."""


class PipelineError(MMPlanError):
    """A generation stage failed beyond its retry budget."""


class DatasetError(MMPlanError):
    """Dataset directory is unusable."""
