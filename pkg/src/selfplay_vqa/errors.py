"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EngineError):
    """Invalid or inconsistent engine configuration."""


class DatasetError(EngineError):
    """Malformed dataset file or unresolvable record."""


class PromptError(EngineError):
    """Unknown template, bad seed kind, or invalid render arguments."""


class GatewayError(EngineError):
    """Base class for model-backend failures."""


class BackendNotRegistered(GatewayError):
    """A request referenced a backend id that was never registered."""


class AuthError(GatewayError):
    """Backend rejected the configured credential."""


class GatewayTimeout(GatewayError):
    """Backend did not reply within the configured timeout, retries exhausted."""


class MalformedReply(GatewayError):
    """Backend replied, but not in the shape the adapter expects."""


class ScriptedMiss(EngineError):
    """A scripted test double received a request it has no rule for."""
