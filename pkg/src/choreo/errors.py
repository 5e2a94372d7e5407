from .numerics.tensor import NumericalAbort


class ConfigError(ValueError):
    """Invalid configuration, shapes or stage ordering (CLI exit code 2)."""


class StageOrderError(ConfigError):
    """A pipeline stage was run before the checkpoint it depends on existed."""


class DataError(ValueError):
    """Malformed or inconsistent data files (CLI exit code 3)."""


__all__ = ["ConfigError", "DataError", "NumericalAbort", "StageOrderError"]
