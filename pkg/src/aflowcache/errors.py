"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status without a lookup table.
"""

from __future__ import annotations


class AflowError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ConfigError(AflowError, ValueError):
    exit_code = 2


class InputError(AflowError, ValueError):
    exit_code = 3


class InvalidConfig(ConfigError):
    pass


class DomainError(ConfigError):
    """A formula was evaluated outside the range where it holds."""


class UnsupportedProtocol(InputError):
    pass


class BadMagic(InputError):
    pass


class TruncatedHeader(InputError):
    pass


class UnsupportedLinkType(InputError):
    pass


class SchemaMismatch(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OutOfOrder(InputError):
    pass


class EmptyInput(InputError):
    pass


class InsufficientRanks(InputError):
    pass


class InsufficientBins(InputError):
    pass


class MissingPayload(InputError):
    pass


class MissingTruthLabel(InputError):
    pass


class InvariantViolation(AflowError):
    exit_code = 4
