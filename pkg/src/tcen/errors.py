"""Exception hierarchy.  The CLI maps these onto exit codes."""


class TcenError(Exception):
    """Base class for all package errors."""


class ConfigError(TcenError, ValueError):
    """Bad configuration or usage (CLI exit code 1)."""


class DataError(TcenError, ValueError):
    """Malformed or inconsistent corpus/checkpoint data (CLI exit code 2)."""


class NumericError(TcenError, ArithmeticError):
    """Non-finite values, detached losses and similar (CLI exit code 3)."""


class ShapeError(NumericError, ValueError):
    """A primitive received inputs of non-conforming shapes."""

    def __init__(self, kind: str, detail: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
