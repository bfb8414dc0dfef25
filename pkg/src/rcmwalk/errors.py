"""Exception hierarchy shared across the package.

Validation errors (bad parameters, domains, malformed configs) are kept
separate from numerical failures (solver non-convergence) so callers such
as the CLI can map them to distinct exit codes.
"""


class RcmError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RcmError, ValueError):
    """A parameter or input is outside its documented domain."""


class NumericalError(RcmError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""


class EmptyClusterError(ValidationError):
    """No bond reaches the percolation threshold; there is no strong cluster."""


class EnvironmentFileError(RcmError, IOError):
    """An environment file could not be read back."""


class VersionMismatchError(EnvironmentFileError):
    """The file carries an unsupported format version."""


class TruncatedFileError(EnvironmentFileError):
    """The file is shorter than its header promises."""


class ChecksumError(EnvironmentFileError):
    """The CRC trailer does not match the file contents."""
