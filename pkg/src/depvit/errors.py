"""Exception types shared across the package.

Every failure mode maps to one of these so callers (and the CLI) can
distinguish bad usage from bad data from numeric blow-ups.
"""


class DepvitError(Exception):
    """Base class for all package errors."""


class ShapeError(DepvitError):
    """Operands have incompatible shapes or dtypes."""


class NumericError(DepvitError):
    """A computation produced NaN/Inf or failed to converge."""


class UsageError(DepvitError):
    """An API or CLI precondition was violated by the caller."""


class ConfigError(UsageError):
    """A configuration file or value is malformed."""


class IntegrityError(DepvitError):
    """Stored structures (ledger, tree, container) are internally inconsistent."""


class FormatError(DepvitError):
    """A binary or text input does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DepvitError):
    """Training diverged (non-finite loss) or could not proceed."""
