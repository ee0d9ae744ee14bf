"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError and ConfigurationError
exit 1, ProviderError (and plain OSError) exit 2.
"""


class FMiFoodError(Exception):
    """Base class for all package errors."""


class ValidationError(FMiFoodError):
    """Input data violates a documented precondition or invariant."""


class ConfigurationError(FMiFoodError):
    """Configuration values are inconsistent or incomplete."""


class ProviderError(FMiFoodError):
    """A remote description provider failed after retries."""


class TrainingAbort(FMiFoodError):
    """Training hit a non-finite loss; message names the offending batch."""
