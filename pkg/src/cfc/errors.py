"""Exception hierarchy shared by every cfc module."""


class CfcError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CfcError, ValueError):
    pass


class DegenerateInputError(CfcError, ValueError):
    pass


class SpanError(CfcError, IndexError):
    pass


class TapeError(CfcError, RuntimeError):
    pass


class NonFiniteError(CfcError, FloatingPointError):
    pass


class ConfigError(CfcError, ValueError):
    pass


class VocabularyError(CfcError, IndexError):
    pass


class LabelError(CfcError, IndexError):
    pass


class IngestionError(CfcError, ValueError):
    """Raised when dataset records are rejected.

    ``problems`` maps record id (or position) to the reason it was rejected.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = dict(problems or {})


class EmbeddingParseError(CfcError, ValueError):
    pass


class CheckpointError(CfcError, RuntimeError):
    pass


class DivergenceError(CfcError, FloatingPointError):
    pass
