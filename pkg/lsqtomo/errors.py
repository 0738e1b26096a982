"""Exception hierarchy; each class carries the CLI exit code it maps to."""

from __future__ import annotations


class TomographyError(Exception):
    exit_code = 1


class ConfigError(TomographyError, ValueError):
    """Invalid configuration or arguments, detected before any computation."""

    exit_code = 2


class LevelOutOfRangeError(ConfigError):
    def __init__(self, n: int, limit: int):
        super().__init__(f"level n={n} outside the bound range 0..{limit} (n_M={limit})")
        self.n = n
        self.limit = limit


class GeometryMismatchError(ConfigError):
    pass


class NumericalError(TomographyError):
    exit_code = 3


class QuasiSingularError(NumericalError):
    def __init__(self, condition: float, hint: str = "use a regularized inversion"):
        super().__init__(f"Gram matrix is quasi-singular (condition estimate {condition:.3e}); {hint}")
        self.condition = condition
        self.hint = hint


class StorageError(TomographyError):
    exit_code = 4


class SchemaVersionError(StorageError):
    pass
