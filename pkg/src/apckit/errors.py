"""Shared error types."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""
