"""Exception hierarchy shared across the package.

CorruptionError maps to exit code 3 in the CLI; every other subclass maps
to exit code 2 (validation failure).
"""


class TokenRankError(Exception):
    """Base class for all package errors."""


class FormatError(TokenRankError):
    """File has an unsupported or inconsistent structure."""


class CapacityError(TokenRankError):
    """A fixed-width field cannot represent the requested value."""


class CorruptionError(TokenRankError):
    """Stored data is damaged (truncation, checksum mismatch, trailing bytes)."""


class ValidationError(TokenRankError):
    """Input violates a documented invariant or precondition."""


class ProtocolError(TokenRankError):
    """Evaluation protocol violated (no queries, empty relevant set, ...)."""


class DegenerateInputError(TokenRankError):
    """Numerically degenerate input (zero vector where a direction is required)."""


class DegenerateDescriptorWarning(UserWarning):
    """A descriptor block collapsed to zero and was replaced by a placeholder."""
