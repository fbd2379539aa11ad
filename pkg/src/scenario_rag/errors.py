"""Exception types shared across the package."""


class ScenarioRagError(Exception):
    """Base class for all package errors."""


class SchemaError(ScenarioRagError):
    """A CSV/file schema is missing or malformed."""


class DataError(ScenarioRagError):
    """Input data violates a required property (e.g. non-monotone timestamps)."""


class InvalidScenarioError(ScenarioRagError):
    """A scenario or scene graph violates a structural invariant."""


class ConfigError(ScenarioRagError):
    """A configuration value is out of its legal range."""


class InputError(ScenarioRagError):
    """An operation received an argument it cannot work on (e.g. empty graph)."""


class DimensionError(ScenarioRagError):
    """Requested embedding dimension exceeds the usable rank."""

    def __init__(self, message, usable_rank=None):
        super().__init__(message)
        self.usable_rank = usable_rank


class RoutingError(ScenarioRagError):
    """No expert index is registered for an interaction type."""


class IndexLoadError(ScenarioRagError):
    """A persisted index/model file is unreadable or version-incompatible."""


class LlmParseError(ScenarioRagError):
    """An LLM response did not follow the expected plan grammar."""

    def __init__(self, message, raw_text=""):
        super().__init__(message)
        self.raw_text = raw_text


class LlmTransportError(ScenarioRagError):
    """The LLM endpoint could not be reached; the call may be retried."""
