"""Exception hierarchy shared by every module."""


class AnchorAlignError(Exception):
    pass


class UsageError(AnchorAlignError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class FormatError(AnchorAlignError):
    """File does not carry the expected magic bytes or version."""


class CorruptionError(AnchorAlignError):
    """File header is valid but the payload is truncated or inconsistent."""


class DataError(AnchorAlignError, ValueError):
    """Input values are unusable (non-finite, zero-norm tokens, ...)."""


class NumericError(AnchorAlignError, ArithmeticError):
    """A computation produced a non-finite or degenerate intermediate."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
