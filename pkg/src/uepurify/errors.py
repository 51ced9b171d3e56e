"""Exception types shared across modules (the CLI maps them to exit codes)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""
