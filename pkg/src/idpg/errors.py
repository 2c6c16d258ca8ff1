"""Exception types raised across the package."""


class IdpgError(Exception):
    """Base class for all package errors."""


class DimensionError(IdpgError, ValueError):
    pass


class RankError(IdpgError, ValueError):
    pass


class ContractError(IdpgError, RuntimeError):
    pass


class ConfigError(IdpgError, ValueError):
    pass


class VocabError(IdpgError, IndexError):
    pass


class LengthError(IdpgError, ValueError):
    pass


class BiasIndexError(IdpgError, IndexError):
    pass


class ParseError(IdpgError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    pass


class SizeError(IdpgError, ValueError):
    pass


class EmptyInputError(IdpgError, ValueError):
    pass


class UndefinedMetricError(IdpgError, ValueError):
    pass


class AuditError(IdpgError, AssertionError):
    def __init__(self, message, deltas=None):
        super().__init__(message)
        self.deltas = deltas or {}


class DivergenceError(IdpgError, FloatingPointError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
