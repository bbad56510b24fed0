"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation/parse problems exit 2,
numerical failures exit 3, I/O and bundle-integrity failures exit 4.
"""


class LeapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LeapError):
    """Input violates a documented precondition or invariant."""


class ParseError(LeapError):
    """A data file is malformed; message carries the offending location."""


class NumericalError(LeapError):
    """A computation produced non-finite values or diverged."""


class BundleError(LeapError):
    """A model bundle is unreadable, tampered with, or version-incompatible."""
