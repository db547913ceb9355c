"""Exception types shared across the package.

Plain ValueError is used for invalid arguments; the classes here cover
format/IO and numeric failure modes that callers may want to catch
separately (the CLI maps them to distinct exit codes).
"""

from __future__ import annotations


class UnsupportedFormatError(Exception):
    """File does not carry the expected magic or sample layout."""


class CorruptFileError(Exception):
    """File header and payload disagree (truncated or padded data)."""


class InvalidConfigError(Exception):
    """Configuration rejected; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(message or f"invalid config key: {key}")


class NumericError(ArithmeticError):
    """A numeric op produced a non-finite value; ``op`` identifies it."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by op '{op}'")
