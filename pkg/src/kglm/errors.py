"""Exception types shared across modules.

DataError subclasses map to CLI exit code 2, NumericError to exit code 3.
"""


class KglmError(Exception):
    pass


class DataError(KglmError):
    """Bad input data: malformed files, constraint violations, missing refs."""


class ParseError(DataError):
    def __init__(self, message: str, path: str = "", line: int = 0):
        loc = f"{path}:{line}: " if path or line else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class ValidationError(DataError):
    pass


class LengthError(DataError):
    """Sequence exceeds the configured maximum length."""


class CheckpointError(DataError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class UnsupportedQueryError(DataError):
    """Predictor cannot score this query (e.g. KGE model with unseen entity)."""


class NumericError(KglmError):
    """Non-finite values where finite ones are required."""
