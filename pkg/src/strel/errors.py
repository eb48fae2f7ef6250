"""Shared exception types with CLI exit-code conventions."""


class ValidationError(ValueError):
    """An input record or argument violates a documented invariant (exit 1)."""


class ConfigError(ValueError):
    """A configuration value is unusable (exit 1)."""


class RuntimeAbort(RuntimeError):
    """A run aborted midway, e.g. on non-finite training quantities (exit 2)."""
