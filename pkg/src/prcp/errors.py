"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameters or configuration, detected before any compute."""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, tables, shapes)."""
