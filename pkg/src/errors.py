"""
Error types for SourceCV.
Both derive from ValueError so callers catching ValueError keep working.
"""


class DataError(ValueError):
    """Invalid manifest, payload, dataset or protocol precondition on the data."""


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""
