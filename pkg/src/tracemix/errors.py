"""Shared exception types."""


class TraceParseError(ValueError):
    """Raised when a trace file is malformed or empty."""


class ConfigError(ValueError):
    """Raised for inconsistent or unusable configuration."""
