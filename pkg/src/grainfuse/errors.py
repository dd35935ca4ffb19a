"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical divergence with 3, and incompatible inputs (wrong
modality, shape, or task) with 4.
"""


class GrainFuseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GrainFuseError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class NumericalDivergenceError(GrainFuseError):
    """A numerical routine produced NaN/Inf and aborted (CLI exit code 3)."""


class IncompatibilityError(GrainFuseError):
    """Inputs that cannot be combined: modality, shape, or version mismatch
    (CLI exit code 4)."""


class UnsupportedTaskError(IncompatibilityError):
    """A task was requested on a reconstruction set lacking the required
    modality (CLI exit code 4)."""


class TensorFormatError(GrainFuseError):
    """Malformed, truncated, or unsupported tensor container file."""
