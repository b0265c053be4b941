"""Exception hierarchy shared across the package."""


class FacorError(Exception):
    """Base class for all errors raised by facornet."""


class ConfigurationError(FacorError, ValueError):
    """Shapes or settings that cannot work together."""


class NumericError(FacorError, ArithmeticError):
    """Non-finite values or undefined numeric operations."""


class DataError(FacorError, ValueError):
    """Input data that violates its declared contract."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class ProtocolError(FacorError):
    """A protocol precondition (batch size, folds, classes) is not met."""


class MissingEntryError(FacorError, KeyError):
    """A requested id is absent from a manifest or table."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing entry"
