"""Exception types shared across the package.

Invalid arguments raise plain ``ValueError`` subclasses so callers can catch
them generically; ledger and codec failures get their own classes because the
CLI maps them to diagnostics.
"""


class AmlodaError(Exception):
    """Base class for all package errors."""


class InvalidArgument(AmlodaError, ValueError):
    pass


class ParseError(AmlodaError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(AmlodaError, ValueError):
    pass


class DomainError(AmlodaError, ValueError):
    pass


class CodecError(AmlodaError, ValueError):
    pass


class StateError(AmlodaError, RuntimeError):
    pass


class KeyReuseError(AmlodaError):
    """A one-time key was asked to sign a second message."""


class RejectedTransaction(AmlodaError):
    pass


class DoubleSubmission(AmlodaError):
    pass


class MiningFailure(AmlodaError):
    pass
